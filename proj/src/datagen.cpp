#include "fedsdaf/datagen.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "fedsdaf/errors.hpp"

namespace fedsdaf::data {

namespace {

constexpr std::uint64_t kPrototypeStream = 0;
constexpr std::uint64_t kDomainStreamBase = 1;
constexpr std::uint64_t kPretrainStream = 0x70726574u;  // disjoint from domains

void validate(const DataConfig& cfg) {
  if (cfg.n_domains < 2)
    throw ConfigError("data: at least two domains are required");
  if (cfg.n_classes < 2) throw ConfigError("data: at least two classes");
  if (cfg.d_in == 0) throw ConfigError("data: input dimension must be positive");
  if (cfg.train_fraction <= 0.0 || cfg.train_fraction >= 1.0)
    throw ConfigError("data: train_fraction must lie strictly in (0,1)");
  std::size_t train_n =
      static_cast<std::size_t>(cfg.train_fraction * cfg.n_per_class);
  if (train_n == 0 || train_n >= cfg.n_per_class)
    throw ConfigError("data: n_per_class too small for the requested split");
  if (cfg.shift_strength < 0.0)
    throw ConfigError("data: shift_strength must be nonnegative");
  if (cfg.noise_sigma < 0.0)
    throw ConfigError("data: noise_sigma must be nonnegative");
  if (cfg.generator != "blobs" && cfg.generator != "moons")
    throw ConfigError("data: unknown generator '" + cfg.generator + "'");
  if (cfg.generator == "moons") {
    if (cfg.n_classes != 2)
      throw ConfigError("data: the moons generator is two-class only");
    if (cfg.d_in < 2)
      throw ConfigError("data: the moons generator needs d_in >= 2");
  }
}

DomainSpec draw_spec(const DataConfig& cfg, std::uint32_t domain_id, Rng& rng) {
  DomainSpec spec;
  spec.domain_id = domain_id;
  spec.noise_sigma = cfg.noise_sigma;
  std::size_t pairs = cfg.d_in / 2;
  spec.angles.resize(pairs);
  for (std::size_t p = 0; p < pairs; ++p)
    spec.angles[p] = cfg.shift_strength * rng.uniform(-1.0, 1.0);
  spec.scales.resize(cfg.d_in);
  for (std::size_t j = 0; j < cfg.d_in; ++j)
    spec.scales[j] = std::exp(cfg.shift_strength * rng.uniform(-0.5, 0.5));
  spec.translation.resize(cfg.d_in);
  for (std::size_t j = 0; j < cfg.d_in; ++j)
    spec.translation[j] = cfg.shift_strength * rng.normal();
  return spec;
}

std::vector<std::vector<double>> draw_prototypes(const DataConfig& cfg,
                                                 std::uint64_t seed) {
  Rng rng = Rng(seed).spawn(kPrototypeStream);
  std::vector<std::vector<double>> protos(cfg.n_classes,
                                          std::vector<double>(cfg.d_in));
  for (std::size_t c = 0; c < cfg.n_classes; ++c)
    for (std::size_t j = 0; j < cfg.d_in; ++j)
      protos[c][j] = cfg.prototype_scale * rng.normal();
  return protos;
}

// One raw (untransformed) sample of class c into row[0..d).
void draw_raw_sample(const DataConfig& cfg,
                     const std::vector<std::vector<double>>& protos,
                     std::size_t c, Rng& rng, double* row) {
  if (cfg.generator == "blobs") {
    for (std::size_t j = 0; j < cfg.d_in; ++j)
      row[j] = protos[c][j] + cfg.noise_sigma * rng.normal();
    return;
  }
  // Two interleaved half-circles in the first two coordinates; the rest is
  // noise. prototype_scale sets the moon radius.
  double theta = rng.uniform(0.0, 3.14159265358979323846);
  double r = cfg.prototype_scale;
  double mx, my;
  if (c == 0) {
    mx = r * std::cos(theta);
    my = r * std::sin(theta);
  } else {
    mx = r - r * std::cos(theta);
    my = r * 0.5 - r * std::sin(theta);
  }
  row[0] = mx + cfg.noise_sigma * rng.normal();
  row[1] = my + cfg.noise_sigma * rng.normal();
  for (std::size_t j = 2; j < cfg.d_in; ++j)
    row[j] = cfg.noise_sigma * rng.normal();
}

}  // namespace

void SampleSet::append(const double* row, int label) {
  x.insert(x.end(), row, row + d);
  y.push_back(label);
  ++n;
}

void SampleSet::shuffle(Rng& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<double> nx(x.size());
  std::vector<int> ny(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(&nx[i * d], &x[perm[i] * d], d * sizeof(double));
    ny[i] = y[perm[i]];
  }
  x.swap(nx);
  y.swap(ny);
}

void apply_transform(const DomainSpec& spec, double* row, std::size_t d) {
  // Plane rotations on coordinate pairs (2p, 2p+1), then scale, then shift.
  for (std::size_t p = 0; p < spec.angles.size(); ++p) {
    double c = std::cos(spec.angles[p]);
    double s = std::sin(spec.angles[p]);
    double a = row[2 * p], b = row[2 * p + 1];
    row[2 * p] = c * a - s * b;
    row[2 * p + 1] = s * a + c * b;
  }
  for (std::size_t j = 0; j < d; ++j)
    row[j] = spec.scales[j] * row[j] + spec.translation[j];
}

std::vector<DomainDataset> make_domains(const DataConfig& cfg,
                                        std::uint64_t seed) {
  validate(cfg);
  auto protos = draw_prototypes(cfg, seed);
  std::size_t train_n =
      static_cast<std::size_t>(cfg.train_fraction * cfg.n_per_class);

  std::vector<DomainDataset> out;
  for (std::size_t dom = 0; dom < cfg.n_domains; ++dom) {
    Rng rng = Rng(seed).spawn(kDomainStreamBase + dom);
    DomainDataset ds;
    ds.domain_id = static_cast<std::uint32_t>(dom);
    ds.spec = draw_spec(cfg, ds.domain_id, rng);
    ds.train.d = ds.test.d = cfg.d_in;
    std::vector<double> row(cfg.d_in);
    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
      for (std::size_t i = 0; i < cfg.n_per_class; ++i) {
        draw_raw_sample(cfg, protos, c, rng, row.data());
        apply_transform(ds.spec, row.data(), cfg.d_in);
        for (double v : row)
          if (!std::isfinite(v))
            throw NumericalError("data: generated a non-finite sample");
        (i < train_n ? ds.train : ds.test).append(row.data(), static_cast<int>(c));
      }
    }
    ds.train.shuffle(rng);
    ds.test.shuffle(rng);
    out.push_back(std::move(ds));
  }
  return out;
}

std::pair<std::vector<DomainDataset>, DomainDataset> leave_one_out(
    const std::vector<DomainDataset>& domains, std::size_t target_index) {
  if (target_index >= domains.size())
    throw ConfigError("leave_one_out: target index " +
                      std::to_string(target_index) + " out of range (" +
                      std::to_string(domains.size()) + " domains)");
  std::vector<DomainDataset> sources;
  DomainDataset target;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (i == target_index) {
      target.domain_id = domains[i].domain_id;
      target.spec = domains[i].spec;
      target.test = domains[i].test;
      target.train.d = domains[i].train.d;  // train split deliberately empty
    } else {
      sources.push_back(domains[i]);
    }
  }
  return {std::move(sources), std::move(target)};
}

std::vector<ClientShard> partition_clients(
    const std::vector<DomainDataset>& sources, std::size_t k,
    std::uint64_t seed) {
  std::size_t s = sources.size();
  if (s == 0) throw ConfigError("partition: no source domains");
  if (k < s)
    throw ConfigError("partition: " + std::to_string(k) +
                      " clients cannot cover " + std::to_string(s) +
                      " domains one-domain-per-client");
  Rng rng(Rng::mix(seed, 0x706172u));

  std::vector<ClientShard> shards;
  std::size_t base = k / s, extra = k % s;
  for (std::size_t dom = 0; dom < s; ++dom) {
    std::size_t clients_here = base + (dom < extra ? 1 : 0);
    const SampleSet& pool = sources[dom].train;
    std::vector<ClientShard> local(clients_here);
    for (auto& sh : local) {
      sh.domain_id = sources[dom].domain_id;
      sh.data.d = pool.d;
    }
    // Deal each class round-robin so every shard keeps the label mix.
    std::map<int, std::size_t> dealt;
    for (std::size_t i = 0; i < pool.n; ++i) {
      std::size_t slot = dealt[pool.y[i]]++ % clients_here;
      local[slot].data.append(&pool.x[i * pool.d], pool.y[i]);
    }
    for (auto& sh : local) {
      if (sh.data.n == 0)
        throw ConfigError("partition: a client received no samples; lower "
                          "the client count or enlarge the dataset");
      Rng shard_rng = rng.spawn(shards.size() + 7919);
      sh.data.shuffle(shard_rng);
      shards.push_back(std::move(sh));
    }
  }
  return shards;
}

SampleSet make_pretrain_set(const DataConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  auto protos = draw_prototypes(cfg, seed);
  Rng rng = Rng(seed).spawn(kPretrainStream);
  SampleSet out;
  out.d = cfg.d_in;
  std::vector<double> row(cfg.d_in);
  for (std::size_t c = 0; c < cfg.n_classes; ++c)
    for (std::size_t i = 0; i < cfg.n_per_class; ++i) {
      draw_raw_sample(cfg, protos, c, rng, row.data());
      out.append(row.data(), static_cast<int>(c));
    }
  out.shuffle(rng);
  return out;
}

Tensor to_tensor(const SampleSet& s) {
  return Tensor::from_data({s.n, s.d}, s.x);
}

void save_csv(const std::vector<DomainDataset>& domains,
              const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ParseError("cannot open '" + path + "' for writing");
  std::size_t d = domains.empty() ? 0 : domains[0].train.d;
  f << "domain_id,split,y";
  for (std::size_t j = 0; j < d; ++j) f << ",x_" << j;
  f << "\n";
  char buf[40];
  auto dump = [&](const DomainDataset& ds, const SampleSet& set,
                  const char* split) {
    for (std::size_t i = 0; i < set.n; ++i) {
      f << ds.domain_id << "," << split << "," << set.y[i];
      for (std::size_t j = 0; j < set.d; ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", set.x[i * set.d + j]);
        f << "," << buf;
      }
      f << "\n";
    }
  };
  for (const auto& ds : domains) {
    dump(ds, ds.train, "train");
    dump(ds, ds.test, "test");
  }
}

std::vector<DomainDataset> load_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw ParseError(path + ": empty file");
  std::size_t d = 0;
  {
    std::stringstream hs(line);
    std::string col;
    std::vector<std::string> cols;
    while (std::getline(hs, col, ',')) cols.push_back(col);
    if (cols.size() < 4 || cols[0] != "domain_id" || cols[1] != "split" ||
        cols[2] != "y")
      throw ParseError(path + ": unexpected header '" + line + "'");
    d = cols.size() - 3;
  }
  std::map<std::uint32_t, DomainDataset> by_id;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != d + 3)
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": wrong column count");
    try {
      std::uint32_t dom = static_cast<std::uint32_t>(std::stoul(cells[0]));
      int label = std::stoi(cells[2]);
      std::vector<double> row(d);
      for (std::size_t j = 0; j < d; ++j) row[j] = std::stod(cells[3 + j]);
      DomainDataset& ds = by_id[dom];
      ds.domain_id = dom;
      ds.spec.domain_id = dom;
      ds.train.d = ds.test.d = d;
      if (cells[1] == "train")
        ds.train.append(row.data(), label);
      else if (cells[1] == "test")
        ds.test.append(row.data(), label);
      else
        throw ParseError(path + ":" + std::to_string(line_no) +
                         ": unknown split '" + cells[1] + "'");
    } catch (const std::invalid_argument&) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": malformed numeric field");
    } catch (const std::out_of_range&) {
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": numeric field out of range");
    }
  }
  std::vector<DomainDataset> out;
  for (auto& [id, ds] : by_id) out.push_back(std::move(ds));
  return out;
}

}  // namespace fedsdaf::data
