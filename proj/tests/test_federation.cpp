#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "fedsdaf/datagen.hpp"
#include "fedsdaf/errors.hpp"
#include "fedsdaf/federation.hpp"
#include "fedsdaf/losses.hpp"
#include "fedsdaf/model.hpp"
#include "fedsdaf/rng.hpp"

using namespace fedsdaf;
using namespace fedsdaf::fed;

namespace {

model::ModelConfig tiny_cfg() {
  model::ModelConfig cfg;
  cfg.d_in = 4;
  cfg.d_h = 8;
  cfg.d_layers = 1;
  cfg.n_classes = 3;
  cfg.rank = 2;
  cfg.heads = 2;
  return cfg;
}

data::DataConfig tiny_data() {
  data::DataConfig cfg;
  cfg.n_domains = 3;
  cfg.n_classes = 3;
  cfg.n_per_class = 20;
  cfg.d_in = 4;
  return cfg;
}

// A ready-to-train federation: shared frozen backbone, one client per source
// domain, plus the target test set.
struct Fixture {
  std::shared_ptr<const model::BackboneParams> backbone;
  ServerState server;
  std::vector<ClientState> clients;
  data::SampleSet test;
  model::ModelConfig mcfg;
};

Fixture make_fixture(std::uint64_t seed, model::Toggles toggles = {},
                     std::size_t n_clients = 2) {
  Fixture f;
  f.mcfg = tiny_cfg();
  Rng root(seed);
  Rng backbone_rng = root.spawn(1);
  f.backbone = std::make_shared<const model::BackboneParams>(
      model::init_backbone(f.mcfg, backbone_rng));

  auto domains = data::make_domains(tiny_data(), seed);
  auto [sources, target] = data::leave_one_out(domains, 0);
  f.test = target.test;
  auto shards = data::partition_clients(sources, n_clients, seed);

  f.server = server_init(f.mcfg, root.spawn(2), toggles.a_di);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    ClientState c;
    c.client_id = static_cast<std::uint32_t>(i);
    c.domain_id = static_cast<int>(shards[i].domain_id);
    c.train = shards[i].data;
    Rng model_rng = root.spawn(100 + i);
    c.m = model::init_client_model(f.mcfg, toggles, f.backbone,
                                   model::FusionVariant::weighted_sum, 1.0,
                                   model_rng);
    c.rng = root.spawn(200 + i);
    f.clients.push_back(std::move(c));
  }
  return f;
}

std::vector<model::AdapterParams> random_adapters(const model::ModelConfig& cfg,
                                                  Rng rng, double stddev) {
  std::vector<model::AdapterParams> out;
  for (std::size_t s = 0; s < model::insertion_sites(cfg); ++s) {
    model::AdapterParams a = model::init_adapter(cfg, rng);
    for (Tensor* t : {&a.w_down, &a.b_down, &a.w_up, &a.b_up}) {
      std::vector<double>& v = t->mutable_data();
      for (double& x : v) x = rng.normal(0.0, stddev);
    }
    out.push_back(std::move(a));
  }
  return out;
}

Message upload_of(std::uint32_t id, std::uint32_t round,
                  const std::vector<model::AdapterParams>& adapters) {
  Message m;
  m.kind = MessageKind::upload;
  m.direction = Direction::to_server;
  m.round = round;
  m.client_id = id;
  m.payload = encode_adapter_bundle(adapters);
  return m;
}

bool adapters_equal(const std::vector<model::AdapterParams>& a,
                    const std::vector<model::AdapterParams>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Tensor* pa[4] = {&a[i].w_down, &a[i].b_down, &a[i].w_up, &a[i].b_up};
    const Tensor* pb[4] = {&b[i].w_down, &b[i].b_down, &b[i].w_up, &b[i].b_up};
    for (int p = 0; p < 4; ++p) {
      if (pa[p]->shape() != pb[p]->shape()) return false;
      if (std::memcmp(pa[p]->data().data(), pb[p]->data().data(),
                      pa[p]->size() * sizeof(double)) != 0)
        return false;
    }
  }
  return true;
}

std::vector<double> flatten_params(const std::vector<Tensor>& params) {
  std::vector<double> out;
  for (const Tensor& p : params)
    out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

std::string temp_path(const char* tag) {
  return (std::filesystem::temp_directory_path() /
          (std::string("fedsdaf_fed_") + tag + ".bin"))
      .string();
}

}  // namespace

TEST_CASE("messages encode to the documented wire layout and round-trip") {
  Message m;
  m.kind = MessageKind::broadcast;
  m.direction = Direction::to_client;
  m.round = 7;
  m.client_id = 3;
  m.payload = {0xde, 0xad, 0xbe, 0xef};

  std::vector<std::uint8_t> bytes = encode_message(m);
  REQUIRE(bytes.size() == kHeaderBytes + 4);
  CHECK(m.byte_length() == bytes.size());

  // magic "FSM1", little-endian
  CHECK(bytes[0] == 'F');
  CHECK(bytes[1] == 'S');
  CHECK(bytes[2] == 'M');
  CHECK(bytes[3] == '1');
  CHECK(bytes[4] == 1);  // kind broadcast
  CHECK(bytes[5] == 1);  // direction to_client
  CHECK(bytes[6] == 7);  // round, low byte
  CHECK(bytes[10] == 3); // client id, low byte
  CHECK(bytes[14] == 4); // payload length, low byte

  Message back = decode_message(bytes.data(), bytes.size());
  CHECK(back.kind == m.kind);
  CHECK(back.direction == m.direction);
  CHECK(back.round == m.round);
  CHECK(back.client_id == m.client_id);
  CHECK(back.payload == m.payload);

  // corrupted magic
  std::vector<std::uint8_t> bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_message(bad.data(), bad.size()), ParseError);
  // truncated header
  CHECK_THROWS_AS(decode_message(bytes.data(), kHeaderBytes - 1), ParseError);
  // payload length beyond the buffer
  std::vector<std::uint8_t> short_buf(bytes.begin(), bytes.end() - 2);
  CHECK_THROWS_AS(decode_message(short_buf.data(), short_buf.size()),
                  ParseError);
}

TEST_CASE("adapter bundles round-trip bitwise") {
  model::ModelConfig cfg = tiny_cfg();
  auto adapters = random_adapters(cfg, Rng(5), 0.7);
  std::vector<std::uint8_t> bytes = encode_adapter_bundle(adapters);
  auto back = decode_adapter_bundle(bytes.data(), bytes.size());
  CHECK(adapters_equal(adapters, back));

  // count prefix is a u32
  CHECK(bytes[0] == adapters.size());
  CHECK(bytes[1] == 0);

  std::vector<std::uint8_t> empty_bundle = encode_adapter_bundle({});
  CHECK(empty_bundle.size() == 4);
  CHECK(decode_adapter_bundle(empty_bundle.data(), empty_bundle.size()).empty());

  CHECK_THROWS_AS(decode_adapter_bundle(bytes.data(), 3), ParseError);
  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.end() - 5);
  CHECK_THROWS_AS(decode_adapter_bundle(truncated.data(), truncated.size()),
                  ParseError);
}

TEST_CASE("transcripts account bytes and survive a save/load round-trip") {
  Transcript t;
  Message a;
  a.kind = MessageKind::register_client;
  a.payload = {1, 2, 3, 4, 5, 6, 7, 8};
  Message b;
  b.kind = MessageKind::upload;
  b.direction = Direction::to_server;
  b.round = 2;
  b.client_id = 9;
  b.payload = {42};
  t.record(a);
  t.record(b);
  CHECK(t.total_bytes == a.byte_length() + b.byte_length());

  std::string path = temp_path("transcript");
  t.save(path);
  Transcript back = Transcript::load(path);
  REQUIRE(back.messages.size() == 2);
  CHECK(back.total_bytes == t.total_bytes);
  CHECK(back.messages[1].kind == MessageKind::upload);
  CHECK(back.messages[1].round == 2);
  CHECK(back.messages[1].client_id == 9);
  CHECK(back.messages[1].payload == b.payload);

  std::string digest = temp_path("digest");
  t.save_digest(digest);
  CHECK(std::filesystem::file_size(digest) > 0);

  std::filesystem::remove(path);
  std::filesystem::remove(digest);
}

TEST_CASE("step decay multiplies the rate every fifth of the run") {
  TrainSettings s;  // lr 0.1, decay 0.1, fraction 0.2, rounds 30
  CHECK(lr_at_round(s, 0) == 0.1);
  CHECK(lr_at_round(s, 5) == 0.1);
  CHECK(lr_at_round(s, 6) == doctest::Approx(0.01).epsilon(1e-14));
  CHECK(lr_at_round(s, 12) == doctest::Approx(0.001).epsilon(1e-14));
  CHECK(lr_at_round(s, 29) == doctest::Approx(0.1 * 1e-4).epsilon(1e-12));

  s.rounds = 0;  // degenerate schedule falls back to the base rate
  CHECK(lr_at_round(s, 3) == s.lr);
}

TEST_CASE("server init honors the invariant-adapter toggle") {
  model::ModelConfig cfg = tiny_cfg();
  ServerState on = server_init(cfg, Rng(1), true);
  REQUIRE(on.a_di_global.size() == model::insertion_sites(cfg));
  for (const auto& a : on.a_di_global)
    for (double v : a.w_up.data()) CHECK(v == 0.0);  // identity start

  ServerState off = server_init(cfg, Rng(1), false);
  CHECK(off.a_di_global.empty());
}

TEST_CASE("registration computes sample-count weights") {
  Fixture f = make_fixture(11);
  f.clients[0].train.n = 1;
  f.clients[0].train.x.resize(f.clients[0].train.d);
  f.clients[0].train.y.resize(1);
  f.clients[1].train.n = 3;
  f.clients[1].train.x.resize(3 * f.clients[1].train.d);
  f.clients[1].train.y.resize(3);

  register_clients(f.server, f.clients);
  REQUIRE(f.server.weights.size() == 2);
  CHECK(f.server.weights[0] == 0.25);
  CHECK(f.server.weights[1] == 0.75);
  CHECK(f.server.total_samples == 4);

  double sum = 0.0;
  for (double w : f.server.weights) sum += w;
  CHECK(std::abs(sum - 1.0) <= 1e-12);

  // one register message per client, 22-byte header + u64 count
  REQUIRE(f.server.transcript.messages.size() == 2);
  for (const Message& m : f.server.transcript.messages) {
    CHECK(m.kind == MessageKind::register_client);
    CHECK(m.byte_length() == kHeaderBytes + 8);
  }
}

TEST_CASE("registration rejects broken rosters") {
  Fixture f = make_fixture(13);
  f.clients[1].client_id = f.clients[0].client_id;
  CHECK_THROWS_AS(register_clients(f.server, f.clients), ProtocolError);

  Fixture g = make_fixture(13);
  g.clients[0].train = data::SampleSet{};
  CHECK_THROWS_AS(register_clients(g.server, g.clients), ConfigError);

  Fixture h = make_fixture(13);
  h.clients.clear();
  CHECK_THROWS_AS(register_clients(h.server, h.clients), ConfigError);
}

TEST_CASE("broadcast installs deep copies") {
  Fixture f = make_fixture(17);
  register_clients(f.server, f.clients);
  // make the global visibly nonzero first
  f.server.a_di_global = random_adapters(f.mcfg, Rng(99), 0.5);

  std::size_t before = f.server.transcript.messages.size();
  broadcast(f.server, f.clients, {0, 1});
  CHECK(f.server.transcript.messages.size() == before + 2);

  for (const ClientState& c : f.clients)
    CHECK(adapters_equal(c.m.a_di, f.server.a_di_global));

  // mutating the client copy must not leak into the server
  double saved = f.server.a_di_global[0].w_down.at(0, 0);
  f.clients[0].m.a_di[0].w_down.mutable_data()[0] = 1e9;
  CHECK(f.server.a_di_global[0].w_down.at(0, 0) == saved);
  CHECK(f.clients[1].m.a_di[0].w_down.at(0, 0) == saved);
}

TEST_CASE("aggregation matches an independent weighted mean within 1e-12") {
  model::ModelConfig cfg = tiny_cfg();
  const std::size_t K = 5;
  Fixture f = make_fixture(19, {}, K);
  register_clients(f.server, f.clients);

  std::vector<std::vector<model::AdapterParams>> per_client;
  std::vector<Message> uploads;
  for (std::size_t k = 0; k < K; ++k) {
    per_client.push_back(random_adapters(cfg, Rng(1000 + k), 1.0));
    uploads.push_back(
        upload_of(static_cast<std::uint32_t>(k), 0, per_client.back()));
  }

  std::vector<std::uint32_t> ids = {0, 1, 2, 3, 4};
  ServerState s1 = f.server;
  aggregate(s1, uploads, ids);
  CHECK(s1.round == 1);

  // plain-loop oracle over every element
  for (std::size_t site = 0; site < s1.a_di_global.size(); ++site) {
    auto part_of = [site](const std::vector<model::AdapterParams>& a,
                          int p) -> const Tensor& {
      const model::AdapterParams& ad = a[site];
      switch (p) {
        case 0: return ad.w_down;
        case 1: return ad.b_down;
        case 2: return ad.w_up;
        default: return ad.b_up;
      }
    };
    for (int p = 0; p < 4; ++p) {
      const Tensor& got = part_of(s1.a_di_global, p);
      for (std::size_t j = 0; j < got.size(); ++j) {
        double want = 0.0;
        for (std::size_t k = 0; k < K; ++k)
          want += f.server.weights[k] * part_of(per_client[k], p).data()[j];
        CHECK(std::abs(got.data()[j] - want) <= 1e-12);
      }
    }
  }

  // permutation invariance: shuffled upload order gives bitwise-equal output
  ServerState s2 = f.server;
  std::vector<Message> shuffled = {uploads[3], uploads[0], uploads[4],
                                   uploads[1], uploads[2]};
  aggregate(s2, shuffled, {4, 2, 0, 3, 1});
  CHECK(adapters_equal(s1.a_di_global, s2.a_di_global));
}

TEST_CASE("aggregating identical uploads is a bitwise fixed point") {
  model::ModelConfig cfg = tiny_cfg();
  Fixture f = make_fixture(23, {}, 4);
  register_clients(f.server, f.clients);

  auto shared = random_adapters(cfg, Rng(7), 0.9);
  std::vector<Message> uploads;
  for (std::uint32_t k = 0; k < 4; ++k)
    uploads.push_back(upload_of(k, 0, shared));
  aggregate(f.server, uploads, {0, 1, 2, 3});
  CHECK(adapters_equal(f.server.a_di_global, shared));
}

TEST_CASE("aggregation rejects protocol violations") {
  Fixture f = make_fixture(29);
  register_clients(f.server, f.clients);
  auto a = random_adapters(f.mcfg, Rng(3), 0.5);

  // missing upload names the absent client
  try {
    std::vector<Message> only_one = {upload_of(0, 0, a)};
    aggregate(f.server, only_one, {0, 1});
    FAIL("expected ProtocolError");
  } catch (const ProtocolError& e) {
    CHECK(std::string(e.what()).find("client 1") != std::string::npos);
  }

  // stale round tag
  {
    std::vector<Message> stale = {upload_of(0, 5, a), upload_of(1, 0, a)};
    CHECK_THROWS_AS(aggregate(f.server, stale, {0, 1}), ProtocolError);
  }

  // unregistered client id
  {
    std::vector<Message> ghost = {upload_of(0, 0, a), upload_of(9, 0, a)};
    CHECK_THROWS_AS(aggregate(f.server, ghost, {0, 9}), ProtocolError);
  }

  // wrong adapter count in the bundle
  {
    auto two_sites = a;
    two_sites.push_back(two_sites[0]);
    std::vector<Message> fat = {upload_of(0, 0, two_sites), upload_of(1, 0, a)};
    CHECK_THROWS_AS(aggregate(f.server, fat, {0, 1}), ProtocolError);
  }

  // mismatched adapter shape
  {
    model::ModelConfig wide = tiny_cfg();
    wide.rank = 3;
    auto odd = random_adapters(wide, Rng(4), 0.5);
    std::vector<Message> bad = {upload_of(0, 0, odd), upload_of(1, 0, a)};
    CHECK_THROWS_AS(aggregate(f.server, bad, {0, 1}), ProtocolError);
  }
}

TEST_CASE("local training is a no-op at zero epochs or zero rate") {
  losses::LossConfig loss_cfg;

  Fixture f = make_fixture(31);
  register_clients(f.server, f.clients);
  broadcast(f.server, f.clients, {0, 1});

  TrainSettings s;
  s.epochs = 0;
  std::vector<double> before =
      flatten_params(model::trainable_params(f.clients[0].m));
  Message up = client_local_train(f.clients[0], s, loss_cfg, 0);
  std::vector<double> after =
      flatten_params(model::trainable_params(f.clients[0].m));
  CHECK(before == after);
  CHECK(up.kind == MessageKind::upload);
  CHECK(up.client_id == f.clients[0].client_id);

  s.epochs = 2;
  s.lr = 0.0;
  client_local_train(f.clients[1], s, loss_cfg, 0);
  // zero rate: gradients flow but weights cannot move
  std::vector<double> frozen =
      flatten_params(model::trainable_params(f.clients[1].m));
  client_local_train(f.clients[1], s, loss_cfg, 1);
  CHECK(frozen == flatten_params(model::trainable_params(f.clients[1].m)));
}

TEST_CASE("one SGD step equals the hand-applied gradient update") {
  losses::LossConfig loss_cfg;
  Fixture f = make_fixture(37);
  register_clients(f.server, f.clients);
  broadcast(f.server, f.clients, {0, 1});

  // shrink the shard to a single sample so the step is one batch
  ClientState& c = f.clients[0];
  c.train.n = 1;
  c.train.x.resize(c.train.d);
  c.train.y.resize(1);

  // independent gradient: replay the same forward/backward on a detached copy
  std::vector<Tensor> params = model::trainable_params(c.m);
  std::vector<double> w0 = flatten_params(params);
  std::vector<double> grads;
  {
    Tensor x = Tensor::from_data({1, c.train.d}, c.train.x);
    model::BranchLogits bl = model::branch_logits(c.m, x, true);
    losses::BkdLoss L = losses::bkd_loss(bl.z_di, bl.z_dw, bl.z_fused,
                                         c.train.y, loss_cfg, 0.0);
    for (Tensor& p : params) p.zero_grad();
    backward(L.total);
    for (const Tensor& p : params)
      grads.insert(grads.end(), p.grad().begin(), p.grad().end());
    for (Tensor& p : params) p.zero_grad();
  }

  TrainSettings s;
  s.epochs = 1;
  s.batch = 1;
  s.lr = 0.05;
  s.rounds = 30;
  client_local_train(c, s, loss_cfg, 0);

  std::vector<double> w1 = flatten_params(model::trainable_params(c.m));
  REQUIRE(w1.size() == w0.size());
  for (std::size_t i = 0; i < w1.size(); ++i)
    CHECK(w1[i] == doctest::Approx(w0[i] - 0.05 * grads[i]).epsilon(1e-12));
}

TEST_CASE("momentum accelerates repeated steps the classical way") {
  losses::LossConfig loss_cfg;
  Fixture f = make_fixture(41);
  register_clients(f.server, f.clients);
  broadcast(f.server, f.clients, {0, 1});

  ClientState& c = f.clients[0];
  TrainSettings s;
  s.epochs = 3;
  s.lr = 0.01;
  s.momentum = 0.9;
  std::vector<double> before =
      flatten_params(model::trainable_params(c.m));
  client_local_train(c, s, loss_cfg, 0);
  std::vector<double> after = flatten_params(model::trainable_params(c.m));
  CHECK(before != after);
  REQUIRE(c.velocity.size() == model::trainable_params(c.m).size());
  bool any_velocity = false;
  for (const auto& v : c.velocity)
    for (double x : v) any_velocity |= (x != 0.0);
  CHECK(any_velocity);
}

TEST_CASE("a full run is deterministic and leaves the backbone untouched") {
  losses::LossConfig loss_cfg;
  TrainSettings s;
  s.rounds = 2;
  s.epochs = 1;

  auto run_once = [&](std::uint64_t seed) {
    Fixture f = make_fixture(seed);
    RunResult r = run_rounds(f.server, f.clients, f.test, s, loss_cfg);
    return std::make_tuple(encode_adapter_bundle(f.server.a_di_global),
                           r.history, f.backbone);
  };

  auto [bytes_a, hist_a, backbone_a] = run_once(51);
  auto [bytes_b, hist_b, backbone_b] = run_once(51);
  CHECK(bytes_a == bytes_b);
  REQUIRE(hist_a.size() == hist_b.size());
  for (std::size_t i = 0; i < hist_a.size(); ++i) {
    CHECK(hist_a[i].acc_fused == hist_b[i].acc_fused);
    CHECK(hist_a[i].loss_ce == hist_b[i].loss_ce);
    CHECK(hist_a[i].down_bytes == hist_b[i].down_bytes);
  }

  auto [bytes_c, hist_c, backbone_c] = run_once(52);
  CHECK(bytes_a != bytes_c);

  // the frozen trunk never moves during a run
  Fixture f = make_fixture(53);
  std::vector<double> trunk = f.backbone->w_in.data();
  run_rounds(f.server, f.clients, f.test, s, loss_cfg);
  CHECK(trunk == f.backbone->w_in.data());
}

TEST_CASE("run history aligns rounds, metrics and traffic") {
  losses::LossConfig loss_cfg;
  TrainSettings s;
  s.rounds = 3;
  s.epochs = 1;

  Fixture f = make_fixture(61);
  RunResult r = run_rounds(f.server, f.clients, f.test, s, loss_cfg);

  REQUIRE(r.history.size() == s.rounds + 1);
  CHECK(r.history[0].round == 0);
  // row 0 is the pre-training snapshot: registration was the only traffic
  CHECK(r.history[0].down_bytes == 0);
  CHECK(r.history[0].up_bytes == f.clients.size() * (kHeaderBytes + 8));

  const std::size_t bundle =
      encode_adapter_bundle(f.server.a_di_global).size() + kHeaderBytes;
  for (std::size_t i = 1; i < r.history.size(); ++i) {
    CHECK(r.history[i].round == i);
    CHECK(r.history[i].down_bytes == f.clients.size() * bundle);
    CHECK(r.history[i].up_bytes == f.clients.size() * bundle);
    CHECK(r.history[i].acc_fused >= 0.0);
    CHECK(r.history[i].acc_fused <= 1.0);
    CHECK(std::isfinite(r.history[i].loss_ce));
  }
  CHECK(r.final_eval.acc_fused == r.history.back().acc_fused);

  // reusing a server that already ran is a contract violation
  CHECK_THROWS_AS(run_rounds(f.server, f.clients, f.test, s, loss_cfg),
                  ContractError);
}

TEST_CASE("a zero-epoch round leaves the global adapter exactly in place") {
  losses::LossConfig loss_cfg;
  TrainSettings s;
  s.rounds = 1;
  s.epochs = 0;

  Fixture f = make_fixture(67);
  std::vector<std::uint8_t> init = encode_adapter_bundle(f.server.a_di_global);
  run_rounds(f.server, f.clients, f.test, s, loss_cfg);
  CHECK(encode_adapter_bundle(f.server.a_di_global) == init);
}

TEST_CASE("a single client run equals centralized local training") {
  losses::LossConfig loss_cfg;
  TrainSettings s;
  s.rounds = 2;
  s.epochs = 1;

  const std::uint64_t seed = 71;
  Fixture f = make_fixture(seed, {}, 3);
  // keep exactly one client
  f.clients.resize(1);

  // an independent twin built from the same derivation streams, so it starts
  // bitwise identical without sharing any trainable storage
  ClientState standalone;
  standalone.client_id = 0;
  standalone.domain_id = f.clients[0].domain_id;
  standalone.train = f.clients[0].train;
  Rng twin_rng = Rng(seed).spawn(100);
  standalone.m = model::init_client_model(
      f.mcfg, {}, f.backbone, model::FusionVariant::weighted_sum, 1.0,
      twin_rng);
  standalone.rng = Rng(seed).spawn(200);

  std::vector<std::uint8_t> init_bundle =
      encode_adapter_bundle(f.server.a_di_global);

  run_rounds(f.server, f.clients, f.test, s, loss_cfg);

  // centralized replay: broadcast(decode(encode(g))) then train, twice; with
  // one client the aggregate is that client's upload verbatim
  std::vector<model::AdapterParams> global =
      decode_adapter_bundle(init_bundle.data(), init_bundle.size());
  for (std::uint32_t round = 0; round < 2; ++round) {
    std::vector<std::uint8_t> b = encode_adapter_bundle(global);
    standalone.m.a_di = decode_adapter_bundle(b.data(), b.size());
    Message up = client_local_train(standalone, s, loss_cfg, round);
    global = decode_adapter_bundle(up.payload.data(), up.payload.size());
  }
  CHECK(adapters_equal(f.server.a_di_global, global));
}

TEST_CASE("participation below one samples a strict subset each round") {
  losses::LossConfig loss_cfg;
  TrainSettings s;
  s.rounds = 2;
  s.epochs = 1;
  s.participation = 0.5;

  Fixture f = make_fixture(73, {}, 4);
  run_rounds(f.server, f.clients, f.test, s, loss_cfg);

  for (std::uint32_t round = 0; round < 2; ++round) {
    std::size_t broadcasts = 0, uploads = 0;
    for (const Message& m : f.server.transcript.messages) {
      if (m.round != round) continue;
      broadcasts += m.kind == MessageKind::broadcast;
      uploads += m.kind == MessageKind::upload;
    }
    CHECK(broadcasts == 2);
    CHECK(uploads == 2);
  }
}

TEST_CASE("invariant-adapter-off runs exchange empty bundles") {
  losses::LossConfig loss_cfg;
  model::Toggles t;
  t.a_di = false;
  TrainSettings s;
  s.rounds = 1;
  s.epochs = 1;

  Fixture f = make_fixture(79, t);
  run_rounds(f.server, f.clients, f.test, s, loss_cfg);
  CHECK(f.server.a_di_global.empty());
  for (const Message& m : f.server.transcript.messages) {
    if (m.kind == MessageKind::register_client) continue;
    CHECK(m.payload.size() == 4);  // bare zero-count bundle
  }
}

TEST_CASE("evaluation averages per-client branch accuracies") {
  Fixture f = make_fixture(83);
  register_clients(f.server, f.clients);
  broadcast(f.server, f.clients, {0, 1});
  EvalResult r = evaluate(f.server, f.clients, f.test);
  CHECK(r.acc_fused >= 0.0);
  CHECK(r.acc_fused <= 1.0);
  CHECK(r.acc_di >= 0.0);
  CHECK(r.acc_dw >= 0.0);

  // zero-init adapters: every branch view equals the frozen backbone
  CHECK(r.acc_fused == r.acc_di);
  CHECK(r.acc_fused == r.acc_dw);

  data::SampleSet empty;
  CHECK_THROWS_AS(evaluate(f.server, f.clients, empty), ConfigError);
}

TEST_CASE("communication report equals an independent byte sum") {
  losses::LossConfig loss_cfg;
  TrainSettings s;
  s.rounds = 3;
  s.epochs = 1;

  Fixture f = make_fixture(89);
  run_rounds(f.server, f.clients, f.test, s, loss_cfg);

  CommCostModel cost;
  CommReport rep = comm_cost_report(f.server.transcript, f.mcfg, cost);

  std::size_t down = 0, up = 0;
  for (const Message& m : f.server.transcript.messages) {
    if (m.direction == Direction::to_client)
      down += m.byte_length();
    else
      up += m.byte_length();
  }
  CHECK(rep.total_down == down);
  CHECK(rep.total_up == up);
  CHECK(rep.total_logits == 0);
  CHECK(rep.total_down + rep.total_up == f.server.transcript.total_bytes);

  // row 0 carries registration, rows 1..R the per-round traffic
  REQUIRE(rep.rows.size() == s.rounds + 1);
  CHECK(rep.rows[0].down_bytes == 0);
  CHECK(rep.rows[0].up_bytes == f.clients.size() * (kHeaderBytes + 8));
  CHECK(rep.adapter_params ==
        model::insertion_sites(f.mcfg) *
            model::adapter_param_count(f.mcfg.d_h, f.mcfg.rank));

  // enabling the logit model adds one logit matrix per broadcast
  CommCostModel with_logits;
  with_logits.include_logits = true;
  with_logits.logit_batches = 10;
  with_logits.n_classes = f.mcfg.n_classes;
  CommReport rep2 = comm_cost_report(f.server.transcript, f.mcfg, with_logits);
  CHECK(rep2.total_logits ==
        s.rounds * f.clients.size() * 10 * f.mcfg.n_classes * 8);
}

TEST_CASE("logit traffic share shrinks as adapters grow") {
  // exact formula check
  CHECK(logit_traffic_share(1000, 10, 5, 8) ==
        doctest::Approx((10.0 * 5 * 8) / (10.0 * 5 * 8 + 2.0 * 1000 * 8)));
  CHECK(logit_traffic_share(0, 0, 5, 8) == 0.0);

  // the share is monotone decreasing in parameter count and falls below 1%
  // at 1e5 parameters for any plausible batch count
  double prev = 1.0;
  for (std::size_t params : {1000u, 10000u, 100000u, 1000000u}) {
    double share = logit_traffic_share(params, 100, 5, 8);
    CHECK(share < prev);
    prev = share;
  }
  CHECK(logit_traffic_share(100000, 100, 5, 8) < 0.01);
}

TEST_CASE("the transcript audit passes a clean run and flags contraband") {
  losses::LossConfig loss_cfg;
  TrainSettings s;
  s.rounds = 2;
  s.epochs = 1;

  Fixture f = make_fixture(97);
  run_rounds(f.server, f.clients, f.test, s, loss_cfg);

  AuditReport clean = audit_transcript(f.server.transcript, f.mcfg);
  CHECK(clean.ok);
  CHECK(clean.findings.empty());
  CHECK(clean.messages_checked == f.server.transcript.messages.size());

  // an aware-adapter leak: the bundle carries more adapters than the
  // protocol allows
  {
    Transcript t = f.server.transcript;
    auto leak = random_adapters(f.mcfg, Rng(5), 0.5);
    leak.push_back(leak[0]);
    Message m = upload_of(0, 1, leak);
    t.record(m);
    AuditReport rep = audit_transcript(t, f.mcfg);
    CHECK_FALSE(rep.ok);
    REQUIRE(rep.findings.size() == 1);
    CHECK(rep.findings[0].message_index == t.messages.size() - 1);
  }

  // raw samples masquerading as a payload do not decode as adapters
  {
    Transcript t = f.server.transcript;
    Message m;
    m.kind = MessageKind::upload;
    m.direction = Direction::to_server;
    m.round = 1;
    m.client_id = 0;
    m.payload.assign(256, 0x3f);
    t.record(m);
    AuditReport rep = audit_transcript(t, f.mcfg);
    CHECK_FALSE(rep.ok);
    REQUIRE(rep.findings.size() == 1);
    CHECK(rep.findings[0].what.find("adapter bundle") != std::string::npos);
  }

  // a register message padded beyond a bare count is flagged
  {
    Transcript t = f.server.transcript;
    Message m;
    m.kind = MessageKind::register_client;
    m.direction = Direction::to_server;
    m.payload.assign(64, 1);
    t.record(m);
    CHECK_FALSE(audit_transcript(t, f.mcfg).ok);
  }

  // wrong-direction traffic is flagged
  {
    Transcript t = f.server.transcript;
    Message m;
    m.kind = MessageKind::upload;
    m.direction = Direction::to_client;
    m.round = 0;
    m.client_id = 0;
    m.payload = encode_adapter_bundle(f.server.a_di_global);
    t.record(m);
    CHECK_FALSE(audit_transcript(t, f.mcfg).ok);
  }

  // adapters of foreign dimensions are flagged
  {
    Transcript t = f.server.transcript;
    model::ModelConfig wide = tiny_cfg();
    wide.rank = 4;
    Message m = upload_of(0, 1, random_adapters(wide, Rng(6), 0.5));
    t.record(m);
    AuditReport rep = audit_transcript(t, f.mcfg);
    CHECK_FALSE(rep.ok);
    CHECK(rep.findings[0].what.find("dimensions") != std::string::npos);
  }
}

TEST_CASE("aware branch parameters never appear on the wire") {
  losses::LossConfig loss_cfg;
  TrainSettings s;
  s.rounds = 2;
  s.epochs = 1;

  Fixture f = make_fixture(101);
  run_rounds(f.server, f.clients, f.test, s, loss_cfg);

  // every non-register payload decodes to exactly the invariant bundle the
  // client model holds; the aware adapter values are distinct after training
  for (const ClientState& c : f.clients) {
    const std::vector<double>& aware = c.m.a_dw[0].w_down.data();
    for (const Message& m : f.server.transcript.messages) {
      if (m.kind == MessageKind::register_client) continue;
      auto bundle = decode_adapter_bundle(m.payload.data(), m.payload.size());
      for (const auto& a : bundle) {
        CHECK(std::memcmp(a.w_down.data().data(), aware.data(),
                          aware.size() * sizeof(double)) != 0);
      }
    }
  }
}
