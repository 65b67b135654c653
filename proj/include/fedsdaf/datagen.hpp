#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedsdaf/rng.hpp"
#include "fedsdaf/tensor.hpp"

namespace fedsdaf::data {

struct DataConfig {
  std::size_t n_domains = 4;
  std::size_t n_classes = 5;
  std::size_t n_per_class = 200;
  std::size_t d_in = 16;
  double shift_strength = 1.0;
  double noise_sigma = 1.0;
  double prototype_scale = 3.0;
  std::string generator = "blobs";  // "blobs" or "moons"
  double train_fraction = 0.8;
};

// One domain's "style": an invertible affine map (plane rotations, per-axis
// scaling, translation) applied to samples drawn around the shared class
// prototypes, plus the noise level. Magnitudes scale with shift_strength;
// zero shift gives the exact identity.
struct DomainSpec {
  std::uint32_t domain_id = 0;
  std::vector<double> angles;       // one rotation per coordinate pair
  std::vector<double> scales;       // per-axis, strictly positive
  std::vector<double> translation;  // per-axis
  double noise_sigma = 1.0;
};

struct SampleSet {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> x;  // row-major (n, d)
  std::vector<int> y;

  void append(const double* row, int label);
  void shuffle(Rng& rng);
};

struct DomainDataset {
  std::uint32_t domain_id = 0;
  DomainSpec spec;
  SampleSet train;
  SampleSet test;
};

// Every domain shares the same class prototypes (drawn once from the seed);
// domains differ only through their affine transforms.
std::vector<DomainDataset> make_domains(const DataConfig& cfg,
                                        std::uint64_t seed);

// Splits off the held-out target. Sources keep their train and test splits;
// the returned target carries only its test split, so target data cannot
// leak into training by construction.
std::pair<std::vector<DomainDataset>, DomainDataset> leave_one_out(
    const std::vector<DomainDataset>& domains, std::size_t target_index);

struct ClientShard {
  std::uint32_t domain_id = 0;
  SampleSet data;
};

// k == |sources|: one full source domain per client. k > |sources|: each
// domain's train split is dealt into label-preserving, disjoint shards so
// every client still holds data from exactly one domain.
std::vector<ClientShard> partition_clients(
    const std::vector<DomainDataset>& sources, std::size_t k,
    std::uint64_t seed);

// Identity-transform samples around the same prototypes as make_domains
// would draw for this seed; used for optional backbone warm starts.
SampleSet make_pretrain_set(const DataConfig& cfg, std::uint64_t seed);

void apply_transform(const DomainSpec& spec, double* row, std::size_t d);

Tensor to_tensor(const SampleSet& s);

// CSV exchange format, header: domain_id,split,y,x_0..x_{d-1}. Transform
// parameters are not persisted; loaded specs are identity.
void save_csv(const std::vector<DomainDataset>& domains, const std::string& path);
std::vector<DomainDataset> load_csv(const std::string& path);

}  // namespace fedsdaf::data
