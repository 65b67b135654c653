#include "fedsdaf/losses.hpp"

#include <cmath>
#include <string>

#include "fedsdaf/errors.hpp"

namespace fedsdaf::losses {

namespace {

constexpr double kLogFloor = 1e-12;

Tensor onehot(const std::vector<int>& labels, std::size_t n_classes) {
  std::vector<double> data(labels.size() * n_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
      throw ContractError("cross_entropy: label " + std::to_string(y) +
                          " outside [0," + std::to_string(n_classes) + ")");
    data[i * n_classes + static_cast<std::size_t>(y)] = 1.0;
  }
  return Tensor::from_data({labels.size(), n_classes}, std::move(data));
}

}  // namespace

void validate(const LossConfig& cfg) {
  if (cfg.alpha < 0.0)
    throw ConfigError("loss: alpha must be nonnegative");
  if (cfg.alpha_max < 0.0)
    throw ConfigError("loss: alpha_max must be nonnegative");
  if (cfg.tau <= 0.0) throw ConfigError("loss: tau must be positive");
  if (cfg.temperature <= 0.0)
    throw ConfigError("loss: temperature must be positive");
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2 || logits.rows() != labels.size())
    throw ShapeError("cross_entropy: logits must be (batch, classes) with one "
                     "label per row");
  Tensor targets = onehot(labels, logits.cols());
  Tensor log_probs = log(softmax(logits, 1), kLogFloor);
  Tensor picked = sum(multiply(targets, log_probs), 1, false);
  return scalar_mul(mean(picked), -1.0);
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits,
                     double temperature) {
  if (temperature <= 0.0)
    throw ConfigError("kl_divergence: temperature must be positive");
  if (p_logits.ndim() != 2 || p_logits.shape() != q_logits.shape())
    throw ShapeError("kl_divergence: logit shapes must match");
  double inv_t = 1.0 / temperature;
  Tensor p = softmax(scalar_mul(p_logits, inv_t), 1);
  Tensor q = softmax(scalar_mul(q_logits, inv_t), 1);
  Tensor gap = subtract(log(p, kLogFloor), log(q, kLogFloor));
  return mean(sum(multiply(p, gap), 1, false));
}

double alpha_schedule(double t, double alpha_max, double tau) {
  if (tau <= 0.0) throw ConfigError("alpha_schedule: tau must be positive");
  if (alpha_max < 0.0)
    throw ConfigError("alpha_schedule: alpha_max must be nonnegative");
  if (t < 0.0) throw ContractError("alpha_schedule: t must be nonnegative");
  return alpha_max * (1.0 - std::exp(-t / tau));
}

double alpha_at(const LossConfig& cfg, double t) {
  if (cfg.alpha_mode == AlphaMode::fixed) return cfg.alpha;
  return alpha_schedule(t, cfg.alpha_max, cfg.tau);
}

LossConfig without_distillation(const LossConfig& cfg) {
  LossConfig off = cfg;
  off.alpha_mode = AlphaMode::fixed;
  off.alpha = 0.0;
  return off;
}

BkdLoss bkd_loss(const Tensor& z_di, const Tensor& z_dw, const Tensor& z_fused,
                 const std::vector<int>& labels, const LossConfig& cfg,
                 double t) {
  validate(cfg);
  BkdLoss out;
  out.alpha_t = alpha_at(cfg, t);

  Tensor ce;
  if (cfg.ce_target == CeTarget::fused_only) {
    if (!z_fused.defined())
      throw ContractError("bkd_loss: fused_only supervision needs z_fused");
    ce = cross_entropy(z_fused, labels);
  } else if (z_di.defined() && z_dw.defined()) {
    ce = scalar_mul(add(cross_entropy(z_di, labels), cross_entropy(z_dw, labels)),
                    0.5);
  } else if (z_di.defined()) {
    ce = cross_entropy(z_di, labels);
  } else if (z_dw.defined()) {
    ce = cross_entropy(z_dw, labels);
  } else {
    if (!z_fused.defined())
      throw ContractError("bkd_loss: no logits to supervise");
    ce = cross_entropy(z_fused, labels);
  }
  out.ce = ce.value();

  bool both = z_di.defined() && z_dw.defined();
  if (both && out.alpha_t > 0.0) {
    Tensor di_kl = kl_divergence(z_di, detach(z_dw), cfg.temperature);
    Tensor dw_kl = kl_divergence(z_dw, detach(z_di), cfg.temperature);
    out.di_kl = di_kl.value();
    out.dw_kl = dw_kl.value();
    out.total = add(ce, scalar_mul(add(di_kl, dw_kl), out.alpha_t));
    return out;
  }

  if (both) {
    // Reported for logging, but kept out of the graph entirely so the
    // alpha = 0 objective is identical to plain supervision.
    NoGradGuard ng;
    out.di_kl = kl_divergence(detach(z_di), detach(z_dw), cfg.temperature).value();
    out.dw_kl = kl_divergence(detach(z_dw), detach(z_di), cfg.temperature).value();
  }
  out.total = ce;
  return out;
}

}  // namespace fedsdaf::losses
