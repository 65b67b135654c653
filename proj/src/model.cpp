#include "fedsdaf/model.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "fedsdaf/errors.hpp"
#include "fedsdaf/losses.hpp"

namespace fedsdaf::model {

namespace {

constexpr std::uint32_t kAdapterMagic = 0x31414446u;  // "FDA1"
constexpr std::size_t kAdapterHeaderBytes = 12;

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng,
              bool requires_grad) {
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return random_normal({fan_in, fan_out}, rng, stddev, requires_grad);
}

Tensor apply_activation(const Tensor& t, Activation act) {
  switch (act) {
    case Activation::gelu:
      return gelu(t);
    case Activation::relu:
      return relu(t);
    case Activation::identity:
      return t;
  }
  throw ContractError("adapter_forward: unknown activation");
}

void check_hidden(const char* op, const Tensor& t, std::size_t d_h) {
  if (t.ndim() != 2 || t.cols() != d_h)
    throw ShapeError(std::string(op) + ": expected (batch," +
                     std::to_string(d_h) + ") input");
}

}  // namespace

std::size_t insertion_sites(const ModelConfig& cfg) {
  return cfg.per_layer_insertion ? cfg.d_layers : 1;
}

BackboneParams init_backbone(const ModelConfig& cfg, Rng& rng) {
  if (cfg.d_in == 0 || cfg.d_h == 0 || cfg.d_layers == 0 || cfg.n_classes < 2)
    throw ConfigError("backbone: dimensions must be positive, classes >= 2");
  BackboneParams bp;
  bp.w_in = xavier(cfg.d_in, cfg.d_h, rng, false);
  bp.b_in = Tensor::zeros({cfg.d_h});
  for (std::size_t l = 0; l < cfg.d_layers; ++l) {
    bp.w.push_back(xavier(cfg.d_h, cfg.d_h, rng, false));
    bp.b.push_back(Tensor::zeros({cfg.d_h}));
  }
  bp.w_head = xavier(cfg.d_h, cfg.n_classes, rng, false);
  bp.b_head = Tensor::zeros({cfg.n_classes});
  return bp;
}

AdapterParams init_adapter(const ModelConfig& cfg, Rng& rng) {
  if (cfg.rank == 0 || cfg.rank >= cfg.d_h)
    throw ConfigError("adapter: rank must satisfy 0 < r < d_h");
  AdapterParams a;
  a.w_down = xavier(cfg.d_h, cfg.rank, rng, true);
  a.b_down = Tensor::zeros({cfg.rank}, true);
  a.w_up = Tensor::zeros({cfg.rank, cfg.d_h}, true);
  a.b_up = Tensor::zeros({cfg.d_h}, true);
  return a;
}

FusionParams init_fusion(const ModelConfig& cfg, Rng& rng) {
  if (cfg.heads == 0 || cfg.d_h % cfg.heads != 0)
    throw ConfigError("fusion: hidden width " + std::to_string(cfg.d_h) +
                      " is not divisible by " + std::to_string(cfg.heads) +
                      " heads");
  std::size_t d_k = cfg.d_h / cfg.heads;
  FusionParams f;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    f.wq.push_back(xavier(cfg.d_h, d_k, rng, true));
    f.wk.push_back(xavier(cfg.d_h, d_k, rng, true));
    f.wv.push_back(xavier(cfg.d_h, d_k, rng, true));
    f.wo.push_back(Tensor::zeros({d_k, cfg.d_h}, true));
  }
  f.ln_gain = Tensor::full({cfg.d_h}, 1.0, true);
  f.ln_bias = Tensor::zeros({cfg.d_h}, true);
  return f;
}

FusionStrategy init_strategy(const ModelConfig& cfg, FusionVariant variant,
                             double lambda) {
  if (lambda < 0.0) throw ConfigError("fusion: lambda must be nonnegative");
  FusionStrategy s;
  s.variant = variant;
  s.lambda = lambda;
  if (variant == FusionVariant::concat_project)
    s.projection = Tensor::zeros({2 * cfg.d_h, cfg.d_h}, true);
  return s;
}

ClientModel init_client_model(const ModelConfig& cfg, const Toggles& toggles,
                              std::shared_ptr<const BackboneParams> backbone,
                              FusionVariant variant, double lambda, Rng& rng) {
  if (toggles.mhsa && !toggles.a_dw)
    throw ConfigError(
        "toggles: attention fusion lives inside the aware branch; enabling it "
        "with a_dw disabled is contradictory");
  if (!backbone) throw ContractError("client model: backbone is required");
  ClientModel m;
  m.cfg = cfg;
  m.toggles = toggles;
  m.backbone = std::move(backbone);
  for (std::size_t s = 0; s < insertion_sites(cfg); ++s) {
    if (toggles.a_di) m.a_di.push_back(init_adapter(cfg, rng));
    if (toggles.a_dw) {
      m.a_dw.push_back(init_adapter(cfg, rng));
      if (toggles.mhsa) m.fusion.push_back(init_fusion(cfg, rng));
    }
    m.strategy.push_back(init_strategy(cfg, variant, lambda));
  }
  return m;
}

Tensor backbone_forward(const BackboneParams& params, const Tensor& x) {
  if (x.ndim() != 2 || x.cols() != params.w_in.rows())
    throw ShapeError("backbone_forward: expected (batch," +
                     std::to_string(params.w_in.rows()) + ") input");
  Tensor h = gelu(add(matmul(x, params.w_in), params.b_in));
  for (std::size_t l = 0; l < params.w.size(); ++l)
    h = gelu(add(matmul(h, params.w[l]), params.b[l]));
  return h;
}

Tensor head_logits(const BackboneParams& params, const Tensor& h) {
  return add(matmul(h, params.w_head), params.b_head);
}

Tensor adapter_forward(const AdapterParams& a, const Tensor& h, Activation act) {
  check_hidden("adapter_forward", h, a.w_down.rows());
  Tensor bottleneck =
      apply_activation(add(matmul(h, a.w_down), a.b_down), act);
  return add(matmul(bottleneck, a.w_up), a.b_up);
}

Tensor mhsa_fuse(const FusionParams& f, const Tensor& a_dw_out, const Tensor& h,
                 AttnProbe* probe) {
  std::size_t d_h = f.ln_gain.size();
  check_hidden("mhsa_fuse", a_dw_out, d_h);
  check_hidden("mhsa_fuse", h, d_h);
  if (a_dw_out.rows() != h.rows()) {
    throw ShapeError("mhsa_fuse: token batch sizes differ: " +
                     std::to_string(a_dw_out.rows()) + " vs " +
                     std::to_string(h.rows()));
  }
  if (probe) probe->head_weights.clear();

  Tensor t0 = layer_norm(a_dw_out, f.ln_gain, f.ln_bias);
  Tensor t1 = layer_norm(h, f.ln_gain, f.ln_bias);
  Tensor out;
  for (std::size_t head = 0; head < f.wq.size(); ++head) {
    std::size_t d_k = f.wq[head].cols();
    double scale = 1.0 / std::sqrt(static_cast<double>(d_k));
    Tensor q0 = matmul(t0, f.wq[head]);
    Tensor k0 = matmul(t0, f.wk[head]);
    Tensor k1 = matmul(t1, f.wk[head]);
    Tensor v0 = matmul(t0, f.wv[head]);
    Tensor v1 = matmul(t1, f.wv[head]);
    Tensor s0 = scalar_mul(sum(multiply(q0, k0), 1, true), scale);
    Tensor s1 = scalar_mul(sum(multiply(q0, k1), 1, true), scale);
    Tensor weights = softmax(concat({s0, s1}, 1), 1);
    if (probe) probe->head_weights.push_back(weights.data());
    Tensor w0 = slice(weights, 1, 0, 1);
    Tensor w1 = slice(weights, 1, 1, 1);
    Tensor ctx = add(multiply(v0, w0), multiply(v1, w1));
    Tensor head_out = matmul(ctx, f.wo[head]);
    out = out.defined() ? add(out, head_out) : head_out;
  }
  return out;
}

Tensor kia_forward(const Tensor& h, const Tensor& a_dw_hat,
                   const Tensor& a_di_hat, const FusionStrategy& strategy) {
  std::size_t d_h = h.cols();
  if (a_dw_hat.defined()) check_hidden("kia_forward", a_dw_hat, d_h);
  if (a_di_hat.defined()) check_hidden("kia_forward", a_di_hat, d_h);
  if (!a_dw_hat.defined() && !a_di_hat.defined()) return h;

  if (strategy.variant == FusionVariant::weighted_sum) {
    double half = strategy.lambda * 0.5;
    Tensor out = h;
    if (a_dw_hat.defined()) out = add(out, scalar_mul(a_dw_hat, half));
    if (a_di_hat.defined()) out = add(out, scalar_mul(a_di_hat, half));
    return out;
  }

  if (!strategy.projection.defined())
    throw ContractError("kia_forward: concat fusion without a projection");
  Tensor dw = a_dw_hat.defined() ? a_dw_hat : Tensor::zeros({h.rows(), d_h});
  Tensor di = a_di_hat.defined() ? a_di_hat : Tensor::zeros({h.rows(), d_h});
  return add(h, matmul(concat({dw, di}, 1), strategy.projection));
}

namespace {

enum class View { fused, di_only, dw_only };

// Adapter outputs at one insertion site for a given view, fed to kia_forward.
struct SiteOutputs {
  Tensor dw_hat;
  Tensor di_hat;
};

SiteOutputs site_outputs(const ClientModel& m, std::size_t site, const Tensor& h,
                         View view) {
  SiteOutputs so;
  bool want_di = m.toggles.a_di && view != View::dw_only;
  bool want_dw = m.toggles.a_dw && view != View::di_only;
  if (want_di)
    so.di_hat = adapter_forward(m.a_di[site], h, m.cfg.adapter_activation);
  if (want_dw) {
    Tensor raw = adapter_forward(m.a_dw[site], h, m.cfg.adapter_activation);
    so.dw_hat = m.toggles.mhsa ? mhsa_fuse(m.fusion[site], raw, h) : raw;
  }
  return so;
}

// Full trunk pass with adapter residuals applied at every insertion site.
Tensor view_hidden(const ClientModel& m, const Tensor& x, View view) {
  const BackboneParams& bp = *m.backbone;
  Tensor h = gelu(add(matmul(x, bp.w_in), bp.b_in));
  std::size_t sites = insertion_sites(m.cfg);
  for (std::size_t l = 0; l < bp.w.size(); ++l) {
    h = gelu(add(matmul(h, bp.w[l]), bp.b[l]));
    bool is_site = m.cfg.per_layer_insertion ? true : (l + 1 == bp.w.size());
    if (!is_site) continue;
    std::size_t site = m.cfg.per_layer_insertion ? l : 0;
    if (site >= sites) continue;
    SiteOutputs so = site_outputs(m, site, h, view);
    h = kia_forward(h, so.dw_hat, so.di_hat, m.strategy[site]);
  }
  return h;
}

}  // namespace

BranchLogits branch_logits(const ClientModel& m, const Tensor& x,
                           bool need_branches) {
  const BackboneParams& bp = *m.backbone;
  BranchLogits out;
  if (m.cfg.per_layer_insertion) {
    // Views diverge at the first site, so each runs its own trunk pass.
    out.z_fused = head_logits(bp, view_hidden(m, x, View::fused));
    if (need_branches && m.toggles.a_di)
      out.z_di = head_logits(bp, view_hidden(m, x, View::di_only));
    if (need_branches && m.toggles.a_dw)
      out.z_dw = head_logits(bp, view_hidden(m, x, View::dw_only));
    return out;
  }
  // Single site: one trunk pass and one set of adapter outputs feed all
  // three views.
  Tensor h = backbone_forward(bp, x);
  SiteOutputs so = site_outputs(m, 0, h, View::fused);
  out.z_fused = head_logits(bp, kia_forward(h, so.dw_hat, so.di_hat, m.strategy[0]));
  if (need_branches && so.di_hat.defined())
    out.z_di = head_logits(bp, kia_forward(h, Tensor(), so.di_hat, m.strategy[0]));
  if (need_branches && so.dw_hat.defined())
    out.z_dw = head_logits(bp, kia_forward(h, so.dw_hat, Tensor(), m.strategy[0]));
  return out;
}

BranchFeatures branch_features(const ClientModel& m, const Tensor& x) {
  BranchFeatures f;
  f.backbone = backbone_forward(*m.backbone, x);
  f.fused = view_hidden(m, x, View::fused);
  if (m.toggles.a_di) f.di_only = view_hidden(m, x, View::di_only);
  if (m.toggles.a_dw) f.dw_only = view_hidden(m, x, View::dw_only);
  return f;
}

BackboneParams warm_start_backbone(const ModelConfig& cfg, Rng& rng,
                                   const Tensor& x, const std::vector<int>& y,
                                   std::size_t epochs, double lr,
                                   std::size_t batch) {
  BackboneParams frozen = init_backbone(cfg, rng);
  if (epochs == 0) return frozen;
  if (batch == 0) throw ConfigError("warm start: batch size must be positive");
  if (x.rows() != y.size())
    throw ShapeError("warm start: sample/label count mismatch");

  // Trainable working copy; only its values survive into the frozen result.
  BackboneParams t;
  t.w_in = Tensor::from_data(frozen.w_in.shape(), frozen.w_in.data(), true);
  t.b_in = Tensor::from_data(frozen.b_in.shape(), frozen.b_in.data(), true);
  for (std::size_t l = 0; l < frozen.w.size(); ++l) {
    t.w.push_back(Tensor::from_data(frozen.w[l].shape(), frozen.w[l].data(), true));
    t.b.push_back(Tensor::from_data(frozen.b[l].shape(), frozen.b[l].data(), true));
  }
  t.w_head = Tensor::from_data(frozen.w_head.shape(), frozen.w_head.data(), true);
  t.b_head = Tensor::from_data(frozen.b_head.shape(), frozen.b_head.data(), true);

  std::vector<Tensor> params{t.w_in, t.b_in, t.w_head, t.b_head};
  for (std::size_t l = 0; l < t.w.size(); ++l) {
    params.push_back(t.w[l]);
    params.push_back(t.b[l]);
  }

  std::size_t n = x.rows(), d = x.cols();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(idx);
    for (std::size_t start = 0; start < n; start += batch) {
      std::size_t bsz = std::min(batch, n - start);
      std::vector<double> bx(bsz * d);
      std::vector<int> by(bsz);
      for (std::size_t i = 0; i < bsz; ++i) {
        std::size_t src = idx[start + i];
        std::memcpy(&bx[i * d], &x.data()[src * d], d * sizeof(double));
        by[i] = y[src];
      }
      Tensor xb = Tensor::from_data({bsz, d}, std::move(bx));
      Tensor loss =
          losses::cross_entropy(head_logits(t, backbone_forward(t, xb)), by);
      for (Tensor& p : params) p.zero_grad();
      backward(loss);
      for (Tensor& p : params) {
        std::vector<double>& v = p.mutable_data();
        const std::vector<double>& g = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
      }
    }
  }

  BackboneParams out;
  out.w_in = Tensor::from_data(t.w_in.shape(), t.w_in.data(), false);
  out.b_in = Tensor::from_data(t.b_in.shape(), t.b_in.data(), false);
  for (std::size_t l = 0; l < t.w.size(); ++l) {
    out.w.push_back(Tensor::from_data(t.w[l].shape(), t.w[l].data(), false));
    out.b.push_back(Tensor::from_data(t.b[l].shape(), t.b[l].data(), false));
  }
  out.w_head = Tensor::from_data(t.w_head.shape(), t.w_head.data(), false);
  out.b_head = Tensor::from_data(t.b_head.shape(), t.b_head.data(), false);
  return out;
}

std::size_t adapter_param_count(std::size_t d_h, std::size_t rank) {
  return d_h * rank + rank + rank * d_h + d_h;
}

std::size_t adapter_byte_size(std::size_t d_h, std::size_t rank) {
  return kAdapterHeaderBytes + 8 * adapter_param_count(d_h, rank);
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xff);
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_doubles(std::vector<std::uint8_t>& out, const std::vector<double>& v) {
  std::size_t off = out.size();
  out.resize(off + v.size() * 8);
  std::memcpy(out.data() + off, v.data(), v.size() * 8);
}

std::vector<double> get_doubles(const std::uint8_t*& p, std::size_t count) {
  std::vector<double> v(count);
  std::memcpy(v.data(), p, count * 8);
  p += count * 8;
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_adapter(const AdapterParams& a) {
  std::uint32_t d_h = static_cast<std::uint32_t>(a.w_down.rows());
  std::uint32_t r = static_cast<std::uint32_t>(a.w_down.cols());
  std::vector<std::uint8_t> out;
  out.reserve(adapter_byte_size(d_h, r));
  put_u32(out, kAdapterMagic);
  put_u32(out, d_h);
  put_u32(out, r);
  put_doubles(out, a.w_down.data());
  put_doubles(out, a.b_down.data());
  put_doubles(out, a.w_up.data());
  put_doubles(out, a.b_up.data());
  return out;
}

AdapterParams deserialize_adapter(const std::uint8_t* bytes, std::size_t len) {
  if (len < kAdapterHeaderBytes)
    throw ParseError("adapter payload shorter than its header");
  if (get_u32(bytes) != kAdapterMagic)
    throw ParseError("adapter payload has a bad magic tag");
  std::uint32_t d_h = get_u32(bytes + 4);
  std::uint32_t r = get_u32(bytes + 8);
  if (d_h == 0 || r == 0 || r >= d_h)
    throw ParseError("adapter payload declares invalid dimensions");
  if (len != adapter_byte_size(d_h, r))
    throw ParseError("adapter payload length " + std::to_string(len) +
                     " does not match declared dimensions (want " +
                     std::to_string(adapter_byte_size(d_h, r)) + ")");
  const std::uint8_t* p = bytes + kAdapterHeaderBytes;
  AdapterParams a;
  a.w_down = Tensor::from_data({d_h, r}, get_doubles(p, d_h * r), true);
  a.b_down = Tensor::from_data({r}, get_doubles(p, r), true);
  a.w_up = Tensor::from_data({r, d_h}, get_doubles(p, r * d_h), true);
  a.b_up = Tensor::from_data({d_h}, get_doubles(p, d_h), true);
  return a;
}

AdapterParams deserialize_adapter(const std::vector<std::uint8_t>& bytes) {
  return deserialize_adapter(bytes.data(), bytes.size());
}

AdapterParams clone_adapter(const AdapterParams& a) {
  AdapterParams c;
  c.w_down = Tensor::from_data(a.w_down.shape(), a.w_down.data(), true);
  c.b_down = Tensor::from_data(a.b_down.shape(), a.b_down.data(), true);
  c.w_up = Tensor::from_data(a.w_up.shape(), a.w_up.data(), true);
  c.b_up = Tensor::from_data(a.b_up.shape(), a.b_up.data(), true);
  return c;
}

std::vector<Tensor> trainable_params(const ClientModel& m) {
  std::vector<Tensor> out;
  auto push_adapter = [&out](const AdapterParams& a) {
    out.push_back(a.w_down);
    out.push_back(a.b_down);
    out.push_back(a.w_up);
    out.push_back(a.b_up);
  };
  for (std::size_t s = 0; s < m.strategy.size(); ++s) {
    if (m.toggles.a_di) push_adapter(m.a_di[s]);
    if (m.toggles.a_dw) {
      push_adapter(m.a_dw[s]);
      if (m.toggles.mhsa) {
        const FusionParams& f = m.fusion[s];
        for (std::size_t h = 0; h < f.wq.size(); ++h) {
          out.push_back(f.wq[h]);
          out.push_back(f.wk[h]);
          out.push_back(f.wv[h]);
          out.push_back(f.wo[h]);
        }
        out.push_back(f.ln_gain);
        out.push_back(f.ln_bias);
      }
    }
    if (m.strategy[s].variant == FusionVariant::concat_project &&
        (m.toggles.a_di || m.toggles.a_dw))
      out.push_back(m.strategy[s].projection);
  }
  return out;
}

}  // namespace fedsdaf::model
