#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "fedsdaf/rng.hpp"
#include "fedsdaf/tensor.hpp"

namespace fedsdaf::model {

enum class Activation { gelu, relu, identity };

struct ModelConfig {
  std::size_t d_in = 16;
  std::size_t d_h = 64;
  std::size_t d_layers = 2;
  std::size_t rank = 8;
  std::size_t heads = 4;
  std::size_t n_classes = 5;
  Activation adapter_activation = Activation::gelu;
  // false: adapters attach once after the final encoder layer; true: after
  // every encoder layer (sensitivity study).
  bool per_layer_insertion = false;
};

// Which pieces of the architecture are active. bkd is consumed by the loss;
// the other three shape the forward pass. mhsa requires a_dw.
struct Toggles {
  bool bkd = true;
  bool mhsa = true;
  bool a_di = true;
  bool a_dw = true;
};

// Frozen feed-forward trunk plus classification head. Never trained after
// construction (optionally warm-started first, then frozen).
struct BackboneParams {
  Tensor w_in, b_in;           // d_in -> d_h
  std::vector<Tensor> w, b;    // d_layers blocks of d_h -> d_h
  Tensor w_head, b_head;       // d_h -> n_classes
};

// Bottleneck adapter. The up-projection starts at exactly zero so a fresh
// adapter is an identity residual.
struct AdapterParams {
  Tensor w_down;  // (d_h, r)
  Tensor b_down;  // (r)
  Tensor w_up;    // (r, d_h)
  Tensor b_up;    // (d_h)
};

// Per-head attention projections for the two-token fusion of the aware
// branch, plus the shared pre-attention layer norm. The output projections
// start at zero, which keeps the whole aware branch silent at init.
struct FusionParams {
  std::vector<Tensor> wq, wk, wv;  // (d_h, d_k) per head
  std::vector<Tensor> wo;          // (d_k, d_h) per head, zero-init
  Tensor ln_gain, ln_bias;         // (d_h)
};

enum class FusionVariant { weighted_sum, concat_project };

// How the two adapter outputs are folded back into the trunk. lambda = 1
// gives the equal-halves residual. The concat variant carries its learned
// projection here (zero-initialized, trained locally, never transmitted).
struct FusionStrategy {
  FusionVariant variant = FusionVariant::weighted_sum;
  double lambda = 1.0;
  Tensor projection;  // (2 d_h, d_h); concat_project only
};

// One participant's trainable state: the local copy of the shared adapter,
// the private aware branch, and the fusion machinery. Sized per insertion
// site; the default configuration has exactly one site. Absent components
// (per toggles) are simply empty.
struct ClientModel {
  ModelConfig cfg;
  Toggles toggles;
  std::shared_ptr<const BackboneParams> backbone;
  std::vector<AdapterParams> a_di;
  std::vector<AdapterParams> a_dw;
  std::vector<FusionParams> fusion;
  std::vector<FusionStrategy> strategy;  // always one per site
};

struct BranchLogits {
  Tensor z_di;     // invariant branch view (aware contribution zeroed)
  Tensor z_dw;     // aware branch view (invariant contribution zeroed)
  Tensor z_fused;  // full fusion; the evaluation/inference output
};

struct BranchFeatures {
  Tensor backbone;
  Tensor di_only;
  Tensor dw_only;
  Tensor fused;
};

// Filled by mhsa_fuse when requested: per head, the row-major (batch, 2)
// attention weights of the first token's query.
struct AttnProbe {
  std::vector<std::vector<double>> head_weights;
};

std::size_t insertion_sites(const ModelConfig& cfg);

BackboneParams init_backbone(const ModelConfig& cfg, Rng& rng);
AdapterParams init_adapter(const ModelConfig& cfg, Rng& rng);
FusionParams init_fusion(const ModelConfig& cfg, Rng& rng);
FusionStrategy init_strategy(const ModelConfig& cfg, FusionVariant variant,
                             double lambda);
ClientModel init_client_model(const ModelConfig& cfg, const Toggles& toggles,
                              std::shared_ptr<const BackboneParams> backbone,
                              FusionVariant variant, double lambda, Rng& rng);

// Trains a throwaway copy of the trunk+head on (x, y) pairs and copies the
// result back into a frozen backbone; emulates starting from a pretrained
// foundation model. epochs = 0 returns a plain random frozen backbone.
BackboneParams warm_start_backbone(const ModelConfig& cfg, Rng& rng,
                                   const Tensor& x, const std::vector<int>& y,
                                   std::size_t epochs, double lr,
                                   std::size_t batch);

// Frozen trunk: input projection plus d_layers blocks, gelu throughout.
// Gradients never reach the backbone (its tensors do not require grad).
Tensor backbone_forward(const BackboneParams& params, const Tensor& x);
Tensor head_logits(const BackboneParams& params, const Tensor& h);

// nonlinearity(h W_down + b_down) W_up + b_up
Tensor adapter_forward(const AdapterParams& a, const Tensor& h,
                       Activation act = Activation::gelu);

// Treats [a_dw_out; h] as a two-token sequence per sample: shared layer norm
// per token, H-head scaled dot-product attention, returns the first token's
// attention output.
Tensor mhsa_fuse(const FusionParams& f, const Tensor& a_dw_out, const Tensor& h,
                 AttnProbe* probe = nullptr);

// Residual fusion of the two adapter outputs into the trunk representation.
// Either adapter tensor may be undefined (treated as an exact zero term).
Tensor kia_forward(const Tensor& h, const Tensor& a_dw_hat,
                   const Tensor& a_di_hat, const FusionStrategy& strategy);

// The three logit views. Branch views share the trunk and adapter outputs
// with the fused view where the insertion layout allows it. Views whose
// adapter is toggled off come back undefined; with need_branches = false
// only z_fused is built.
BranchLogits branch_logits(const ClientModel& m, const Tensor& x,
                           bool need_branches = true);

// Penultimate (pre-head) representations of all four views, for export.
BranchFeatures branch_features(const ClientModel& m, const Tensor& x);

std::size_t adapter_param_count(std::size_t d_h, std::size_t rank);
std::size_t adapter_byte_size(std::size_t d_h, std::size_t rank);

// Byte-exact adapter wire format: fixed header (magic, d_h, r) followed by
// the four parameter blocks as little-endian 64-bit floats.
std::vector<std::uint8_t> serialize_adapter(const AdapterParams& a);
AdapterParams deserialize_adapter(const std::uint8_t* bytes, std::size_t len);
AdapterParams deserialize_adapter(const std::vector<std::uint8_t>& bytes);

AdapterParams clone_adapter(const AdapterParams& a);

// Every trainable tensor of the client in a stable order (adapters, fusion,
// concat projection), honoring the toggles.
std::vector<Tensor> trainable_params(const ClientModel& m);

}  // namespace fedsdaf::model
