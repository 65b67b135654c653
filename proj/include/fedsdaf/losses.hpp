#pragma once

#include <vector>

#include "fedsdaf/tensor.hpp"

namespace fedsdaf::losses {

enum class AlphaMode { fixed, dynamic };

// Which logits receive direct label supervision. Default: both branch views,
// averaged, leaving the fused view purely for evaluation.
enum class CeTarget { both_branches, fused_only };

struct LossConfig {
  AlphaMode alpha_mode = AlphaMode::fixed;
  double alpha = 1.0;      // fixed mode
  double alpha_max = 2.0;  // dynamic mode ceiling
  double tau = 100.0;      // dynamic mode time constant
  double temperature = 1.0;
  CeTarget ce_target = CeTarget::both_branches;
};

void validate(const LossConfig& cfg);

// Mean over the batch of -log softmax(logits)[label], with a 1e-12 floor
// inside the log.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Mean over the batch of sum_c p_c (log p_c - log q_c), where p and q are
// the temperature-softmaxed distributions of the two logit sets. Gradients
// flow into both arguments; detach one to freeze it.
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits,
                     double temperature = 1.0);

// alpha_max * (1 - e^(-t/tau)): zero at t=0, monotone, saturating.
double alpha_schedule(double t, double alpha_max, double tau);
double alpha_at(const LossConfig& cfg, double t);

// Returns a copy of cfg whose distillation weight is identically zero, used
// when the distillation toggle is off.
LossConfig without_distillation(const LossConfig& cfg);

struct BkdLoss {
  Tensor total;        // the graph to differentiate
  double ce = 0.0;     // detached components for logging
  double di_kl = 0.0;
  double dw_kl = 0.0;
  double alpha_t = 0.0;
};

// The combined objective: label supervision plus alpha_t times the two
// cross-branch distillation terms. Each distillation term trains only its
// named branch (the opposite branch enters detached). When alpha_t is zero
// or a branch view is absent, the distillation terms are reported but never
// enter the graph, so the returned graph is exactly the supervision graph.
// z_di / z_dw may be undefined when their adapter is disabled; z_fused is
// required only for the fused_only supervision target or when no branch
// view exists.
BkdLoss bkd_loss(const Tensor& z_di, const Tensor& z_dw, const Tensor& z_fused,
                 const std::vector<int>& labels, const LossConfig& cfg,
                 double t);

}  // namespace fedsdaf::losses
