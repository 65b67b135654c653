#include "fedsdaf/federation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "fedsdaf/errors.hpp"

namespace fedsdaf::fed {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> encode_count(std::uint64_t n) {
  std::vector<std::uint8_t> out;
  put_u64(out, n);
  return out;
}

const char* kind_name(MessageKind k) {
  switch (k) {
    case MessageKind::register_client: return "register";
    case MessageKind::broadcast: return "broadcast";
    case MessageKind::upload: return "upload";
  }
  return "unknown";
}

ClientState& client_by_id(std::vector<ClientState>& clients, std::uint32_t id) {
  for (ClientState& c : clients)
    if (c.client_id == id) return c;
  throw ProtocolError("no client with id " + std::to_string(id));
}

}  // namespace

std::vector<std::uint8_t> encode_message(const Message& m) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + m.payload.size());
  put_u32(out, kWireMagic);
  out.push_back(static_cast<std::uint8_t>(m.kind));
  out.push_back(static_cast<std::uint8_t>(m.direction));
  put_u32(out, m.round);
  put_u32(out, m.client_id);
  put_u64(out, m.payload.size());
  out.insert(out.end(), m.payload.begin(), m.payload.end());
  return out;
}

Message decode_message(const std::uint8_t* bytes, std::size_t len) {
  if (len < kHeaderBytes)
    throw ParseError("message shorter than its header");
  if (get_u32(bytes) != kWireMagic)
    throw ParseError("message has a bad magic tag");
  const std::uint8_t kind = bytes[4];
  if (kind > 2)
    throw ParseError("message has unknown kind tag " + std::to_string(kind));
  const std::uint8_t dir = bytes[5];
  if (dir > 1)
    throw ParseError("message has unknown direction tag " + std::to_string(dir));
  Message m;
  m.kind = static_cast<MessageKind>(kind);
  m.direction = static_cast<Direction>(dir);
  m.round = get_u32(bytes + 6);
  m.client_id = get_u32(bytes + 10);
  const std::uint64_t payload_len = get_u64(bytes + 14);
  if (len != kHeaderBytes + payload_len)
    throw ParseError("message length " + std::to_string(len) +
                     " does not match its declared payload of " +
                     std::to_string(payload_len) + " bytes");
  m.payload.assign(bytes + kHeaderBytes, bytes + len);
  return m;
}

std::vector<std::uint8_t> encode_adapter_bundle(
    const std::vector<model::AdapterParams>& adapters) {
  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(adapters.size()));
  for (const model::AdapterParams& a : adapters) {
    std::vector<std::uint8_t> blob = model::serialize_adapter(a);
    out.insert(out.end(), blob.begin(), blob.end());
  }
  return out;
}

std::vector<model::AdapterParams> decode_adapter_bundle(
    const std::uint8_t* bytes, std::size_t len) {
  if (len < 4) throw ParseError("adapter bundle shorter than its count field");
  const std::uint32_t count = get_u32(bytes);
  const std::uint8_t* p = bytes + 4;
  std::size_t remaining = len - 4;
  // Every blob is at least a 12-byte header; a count the payload cannot hold
  // is rejected before any allocation so hostile payloads cannot balloon.
  if (count > remaining / 12 + 1)
    throw ParseError("adapter bundle count " + std::to_string(count) +
                     " exceeds the payload size");
  std::vector<model::AdapterParams> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    // Each blob declares its own dimensions right after the magic tag; peek
    // them to find the blob boundary, then let the deserializer validate.
    if (remaining < 12)
      throw ParseError("adapter bundle truncated inside blob " +
                       std::to_string(i));
    const std::size_t blob_len =
        model::adapter_byte_size(get_u32(p + 4), get_u32(p + 8));
    if (remaining < blob_len)
      throw ParseError("adapter bundle truncated inside blob " +
                       std::to_string(i));
    out.push_back(model::deserialize_adapter(p, blob_len));
    p += blob_len;
    remaining -= blob_len;
  }
  if (remaining != 0)
    throw ParseError("adapter bundle has " + std::to_string(remaining) +
                     " trailing bytes");
  return out;
}

void Transcript::record(const Message& m) {
  messages.push_back(m);
  total_bytes += m.byte_length();
}

void Transcript::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open '" + path + "' for writing");
  std::vector<std::uint8_t> head;
  put_u32(head, kWireMagic);
  put_u64(head, messages.size());
  f.write(reinterpret_cast<const char*>(head.data()),
          static_cast<std::streamsize>(head.size()));
  for (const Message& m : messages) {
    std::vector<std::uint8_t> bytes = encode_message(m);
    std::vector<std::uint8_t> prefix;
    put_u64(prefix, bytes.size());
    f.write(reinterpret_cast<const char*>(prefix.data()),
            static_cast<std::streamsize>(prefix.size()));
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  }
  if (!f) throw ParseError("short write to '" + path + "'");
}

Transcript Transcript::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open '" + path + "'");
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (raw.size() < 12) throw ParseError(path + ": transcript file truncated");
  if (get_u32(raw.data()) != kWireMagic)
    throw ParseError(path + ": not a transcript file");
  const std::uint64_t count = get_u64(raw.data() + 4);
  std::size_t off = 12;
  Transcript t;
  for (std::uint64_t i = 0; i < count; ++i) {
    if (raw.size() - off < 8)
      throw ParseError(path + ": transcript truncated at message " +
                       std::to_string(i));
    const std::uint64_t len = get_u64(raw.data() + off);
    off += 8;
    if (raw.size() - off < len)
      throw ParseError(path + ": transcript truncated at message " +
                       std::to_string(i));
    t.record(decode_message(raw.data() + off, len));
    off += len;
  }
  if (off != raw.size())
    throw ParseError(path + ": trailing bytes after the last message");
  return t;
}

void Transcript::save_digest(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw ParseError("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < messages.size(); ++i) {
    const Message& m = messages[i];
    f << i << " " << kind_name(m.kind) << " "
      << (m.direction == Direction::to_server ? "client->server"
                                              : "server->client")
      << " round=" << m.round << " client=" << m.client_id
      << " payload=" << m.payload.size() << " bytes=" << m.byte_length()
      << "\n";
  }
  f << "total messages=" << messages.size() << " bytes=" << total_bytes
    << "\n";
}

double lr_at_round(const TrainSettings& s, std::size_t round) {
  const std::size_t step = static_cast<std::size_t>(
      std::ceil(s.lr_step_fraction * static_cast<double>(s.rounds)));
  if (step == 0) return s.lr;
  return s.lr * std::pow(s.lr_decay, static_cast<double>(round / step));
}

ServerState server_init(const model::ModelConfig& cfg, Rng rng,
                        bool a_di_enabled) {
  ServerState s;
  s.rng = rng;
  if (a_di_enabled) {
    const std::size_t sites = model::insertion_sites(cfg);
    for (std::size_t i = 0; i < sites; ++i)
      s.a_di_global.push_back(model::init_adapter(cfg, s.rng));
  }
  return s;
}

void register_clients(ServerState& server, std::vector<ClientState>& clients) {
  if (clients.empty())
    throw ConfigError("federation needs at least one client");
  std::uint32_t max_id = 0;
  for (const ClientState& c : clients) max_id = std::max(max_id, c.client_id);
  server.n_k.assign(max_id + 1, 0);
  for (ClientState& c : clients) {
    if (c.train.n == 0)
      throw ConfigError("client " + std::to_string(c.client_id) +
                        " has an empty shard");
    if (server.n_k[c.client_id] != 0)
      throw ProtocolError("duplicate client id " +
                          std::to_string(c.client_id));
    c.n_samples = c.train.n;
    server.n_k[c.client_id] = c.train.n;
    Message m;
    m.kind = MessageKind::register_client;
    m.direction = Direction::to_server;
    m.round = server.round;
    m.client_id = c.client_id;
    m.payload = encode_count(c.train.n);
    server.transcript.record(m);
  }
  server.total_samples =
      std::accumulate(server.n_k.begin(), server.n_k.end(), std::size_t{0});
  server.weights.assign(server.n_k.size(), 0.0);
  for (std::size_t i = 0; i < server.n_k.size(); ++i)
    server.weights[i] = static_cast<double>(server.n_k[i]) /
                        static_cast<double>(server.total_samples);
}

void broadcast(ServerState& server, std::vector<ClientState>& clients,
               const std::vector<std::uint32_t>& participants) {
  const std::vector<std::uint8_t> payload =
      encode_adapter_bundle(server.a_di_global);
  for (std::uint32_t id : participants) {
    ClientState& c = client_by_id(clients, id);
    Message m;
    m.kind = MessageKind::broadcast;
    m.direction = Direction::to_client;
    m.round = server.round;
    m.client_id = id;
    m.payload = payload;
    server.transcript.record(m);
    if (!c.m.toggles.a_di) continue;
    // Decoding gives every recipient its own fresh buffers.
    std::vector<model::AdapterParams> fresh =
        decode_adapter_bundle(payload.data(), payload.size());
    if (fresh.size() != model::insertion_sites(c.m.cfg))
      throw ProtocolError("broadcast carries " + std::to_string(fresh.size()) +
                          " adapters; client " + std::to_string(id) +
                          " expects " +
                          std::to_string(model::insertion_sites(c.m.cfg)));
    c.m.a_di = std::move(fresh);
  }
}

Message client_local_train(ClientState& c, const TrainSettings& s,
                           const losses::LossConfig& loss_cfg,
                           std::uint32_t round) {
  if (c.train.n == 0)
    throw ConfigError("client " + std::to_string(c.client_id) +
                      " has an empty shard");
  const std::vector<Tensor> params = model::trainable_params(c.m);
  if (c.velocity.size() != params.size()) {
    c.velocity.clear();
    for (const Tensor& p : params)
      c.velocity.emplace_back(p.size(), 0.0);
  }
  const double lr = lr_at_round(s, round);
  const std::size_t batch = std::max<std::size_t>(1, s.batch);

  double sum_ce = 0.0, sum_di = 0.0, sum_dw = 0.0, sum_alpha = 0.0;
  std::size_t n_batches = 0;

  std::vector<std::size_t> order(c.train.n);
  for (std::size_t e = 0; e < s.epochs; ++e) {
    const double t = static_cast<double>(round) * static_cast<double>(s.epochs) +
                     static_cast<double>(e);
    std::iota(order.begin(), order.end(), std::size_t{0});
    c.rng.shuffle(order);
    for (std::size_t start = 0; start < c.train.n; start += batch) {
      const std::size_t len = std::min(batch, c.train.n - start);
      std::vector<double> xb(len * c.train.d);
      std::vector<int> yb(len);
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t src = order[start + i];
        std::memcpy(xb.data() + i * c.train.d,
                    c.train.x.data() + src * c.train.d,
                    c.train.d * sizeof(double));
        yb[i] = c.train.y[src];
      }
      const Tensor x = Tensor::from_data({len, c.train.d}, std::move(xb));

      if (params.empty()) {
        // Nothing trainable (every toggle off): still report the loss.
        NoGradGuard ng;
        model::BranchLogits bl = model::branch_logits(c.m, x, true);
        losses::BkdLoss L =
            losses::bkd_loss(bl.z_di, bl.z_dw, bl.z_fused, yb, loss_cfg, t);
        sum_ce += L.ce;
        sum_di += L.di_kl;
        sum_dw += L.dw_kl;
        sum_alpha += L.alpha_t;
        ++n_batches;
        continue;
      }

      model::BranchLogits bl = model::branch_logits(c.m, x, true);
      losses::BkdLoss L =
          losses::bkd_loss(bl.z_di, bl.z_dw, bl.z_fused, yb, loss_cfg, t);
      sum_ce += L.ce;
      sum_di += L.di_kl;
      sum_dw += L.dw_kl;
      sum_alpha += L.alpha_t;
      ++n_batches;

      for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i];
        p.zero_grad();
      }
      backward(L.total);

      for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i];
        const std::vector<double>& g = p.grad();
        std::vector<double>& w = p.mutable_data();
        if (s.momentum > 0.0) {
          std::vector<double>& v = c.velocity[i];
          for (std::size_t j = 0; j < w.size(); ++j) {
            v[j] = s.momentum * v[j] + g[j];
            w[j] -= lr * v[j];
          }
        } else {
          for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
        }
      }
    }
  }

  if (n_batches > 0) {
    c.last_ce = sum_ce / static_cast<double>(n_batches);
    c.last_di_kl = sum_di / static_cast<double>(n_batches);
    c.last_dw_kl = sum_dw / static_cast<double>(n_batches);
    c.last_alpha = sum_alpha / static_cast<double>(n_batches);
  } else {
    c.last_ce = c.last_di_kl = c.last_dw_kl = 0.0;
    c.last_alpha = losses::alpha_at(
        loss_cfg, static_cast<double>(round) * static_cast<double>(s.epochs));
  }

  Message up;
  up.kind = MessageKind::upload;
  up.direction = Direction::to_server;
  up.round = round;
  up.client_id = c.client_id;
  up.payload = encode_adapter_bundle(c.m.a_di);
  return up;
}

void aggregate(ServerState& server, const std::vector<Message>& uploads,
               const std::vector<std::uint32_t>& participants) {
  std::vector<std::uint32_t> order(participants);
  std::sort(order.begin(), order.end());

  double weight_sum = 0.0;
  std::vector<const Message*> by_client;
  for (std::uint32_t id : order) {
    const Message* found = nullptr;
    for (const Message& m : uploads) {
      if (m.kind == MessageKind::upload && m.client_id == id) {
        found = &m;
        break;
      }
    }
    if (!found)
      throw ProtocolError("no upload from client " + std::to_string(id));
    if (found->round != server.round)
      throw ProtocolError("upload from client " + std::to_string(id) +
                          " is tagged round " + std::to_string(found->round) +
                          "; server is at round " +
                          std::to_string(server.round));
    if (id >= server.weights.size())
      throw ProtocolError("client " + std::to_string(id) +
                          " never registered");
    weight_sum += server.weights[id];
    by_client.push_back(found);
  }
  if (!order.empty() && weight_sum <= 0.0)
    throw ProtocolError("participants carry zero aggregation weight");

  for (const Message* m : by_client) server.transcript.record(*m);

  if (!server.a_di_global.empty()) {
    const std::size_t sites = server.a_di_global.size();
    std::vector<std::vector<model::AdapterParams>> decoded;
    decoded.reserve(by_client.size());
    for (std::size_t k = 0; k < by_client.size(); ++k) {
      decoded.push_back(decode_adapter_bundle(by_client[k]->payload.data(),
                                              by_client[k]->payload.size()));
      if (decoded.back().size() != sites)
        throw ProtocolError("upload from client " + std::to_string(order[k]) +
                            " carries " + std::to_string(decoded.back().size()) +
                            " adapters; expected " + std::to_string(sites));
    }

    // Weighted mean, accumulated client by client in ascending id order so
    // the result does not depend on upload arrival order. Centered form
    // (v0 + sum_k w_k (v_k - v0), exact since the weights sum to one) so that
    // identical uploads stay a bitwise fixed point: every delta is zero.
    for (std::size_t site = 0; site < sites; ++site) {
      model::AdapterParams& g = server.a_di_global[site];
      const Tensor* g_parts[4] = {&g.w_down, &g.b_down, &g.w_up, &g.b_up};
      const model::AdapterParams& first = decoded[0][site];
      const Tensor* first_parts[4] = {&first.w_down, &first.b_down,
                                      &first.w_up, &first.b_up};
      std::vector<std::vector<double>> acc(4);
      for (std::size_t k = 0; k < by_client.size(); ++k) {
        const model::AdapterParams& a = decoded[k][site];
        const Tensor* parts[4] = {&a.w_down, &a.b_down, &a.w_up, &a.b_up};
        const double w = server.weights[order[k]] / weight_sum;
        for (int p = 0; p < 4; ++p) {
          if (parts[p]->shape() != g_parts[p]->shape())
            throw ProtocolError("upload from client " +
                                std::to_string(order[k]) +
                                " has mismatched adapter shapes");
          if (k == 0) {
            acc[p] = parts[p]->data();
            continue;
          }
          const std::vector<double>& src = parts[p]->data();
          const std::vector<double>& v0 = first_parts[p]->data();
          for (std::size_t j = 0; j < src.size(); ++j)
            acc[p][j] += w * (src[j] - v0[j]);
        }
      }
      model::AdapterParams fresh;
      fresh.w_down = Tensor::from_data(g.w_down.shape(), std::move(acc[0]), true);
      fresh.b_down = Tensor::from_data(g.b_down.shape(), std::move(acc[1]), true);
      fresh.w_up = Tensor::from_data(g.w_up.shape(), std::move(acc[2]), true);
      fresh.b_up = Tensor::from_data(g.b_up.shape(), std::move(acc[3]), true);
      server.a_di_global[site] = fresh;
    }
  }

  server.round += 1;
}

namespace {

std::size_t argmax_row(const std::vector<double>& data, std::size_t row,
                       std::size_t cols) {
  std::size_t best = 0;
  double best_v = data[row * cols];
  for (std::size_t j = 1; j < cols; ++j) {
    const double v = data[row * cols + j];
    if (v > best_v) {
      best_v = v;
      best = j;
    }
  }
  return best;
}

double accuracy(const Tensor& logits, const std::vector<int>& y) {
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (argmax_row(logits.data(), i, c) == static_cast<std::size_t>(y[i]))
      ++hit;
  return static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace

EvalResult evaluate(const ServerState& server,
                    const std::vector<ClientState>& clients,
                    const data::SampleSet& test) {
  if (test.n == 0) throw ConfigError("evaluation set is empty");
  NoGradGuard ng;
  const Tensor x = data::to_tensor(test);
  double sum_fused = 0.0, sum_di = 0.0, sum_dw = 0.0;
  std::size_t n_di = 0, n_dw = 0;
  for (const ClientState& c : clients) {
    // Each client evaluates with the current global invariant adapters and
    // its own private aware branch. Nothing is mutated, so handles are
    // shared rather than copied.
    model::ClientModel em = c.m;
    if (em.toggles.a_di) em.a_di = server.a_di_global;
    model::BranchLogits bl = model::branch_logits(em, x, true);
    sum_fused += accuracy(bl.z_fused, test.y);
    if (bl.z_di.defined()) {
      sum_di += accuracy(bl.z_di, test.y);
      ++n_di;
    }
    if (bl.z_dw.defined()) {
      sum_dw += accuracy(bl.z_dw, test.y);
      ++n_dw;
    }
  }
  EvalResult r;
  const double k = static_cast<double>(clients.size());
  r.acc_fused = sum_fused / k;
  r.acc_di = n_di ? sum_di / static_cast<double>(n_di) : std::nan("");
  r.acc_dw = n_dw ? sum_dw / static_cast<double>(n_dw) : std::nan("");
  return r;
}

namespace {

std::vector<std::uint32_t> pick_participants(ServerState& server,
                                             const std::vector<ClientState>& clients,
                                             double fraction) {
  std::vector<std::uint32_t> ids;
  ids.reserve(clients.size());
  for (const ClientState& c : clients) ids.push_back(c.client_id);
  std::sort(ids.begin(), ids.end());
  if (fraction >= 1.0) return ids;
  const std::size_t take = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::ceil(fraction * static_cast<double>(ids.size()))));
  server.rng.shuffle(ids);
  ids.resize(std::min(take, ids.size()));
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::pair<std::size_t, std::size_t> bytes_since(const Transcript& t,
                                                std::size_t mark) {
  std::size_t down = 0, up = 0;
  for (std::size_t i = mark; i < t.messages.size(); ++i) {
    if (t.messages[i].direction == Direction::to_client)
      down += t.messages[i].byte_length();
    else
      up += t.messages[i].byte_length();
  }
  return {down, up};
}

}  // namespace

RunResult run_rounds(ServerState& server, std::vector<ClientState>& clients,
                     const data::SampleSet& test, const TrainSettings& s,
                     const losses::LossConfig& loss_cfg,
                     const RunHooks& hooks) {
  if (server.round != 0 || !server.transcript.messages.empty())
    throw ContractError("run_rounds needs a freshly initialized server");
  register_clients(server, clients);

  RunResult out;
  EvalResult ev = evaluate(server, clients, test);

  RoundMetrics row0;
  row0.round = 0;
  row0.acc_fused = ev.acc_fused;
  row0.acc_di = ev.acc_di;
  row0.acc_dw = ev.acc_dw;
  row0.alpha_t = losses::alpha_at(loss_cfg, 0.0);
  row0.down_bytes = 0;
  row0.up_bytes = server.transcript.total_bytes;  // registration traffic
  out.history.push_back(row0);
  if (hooks.after_round) hooks.after_round(0, row0);

  for (std::size_t r = 0; r < s.rounds; ++r) {
    const std::vector<std::uint32_t> ids =
        pick_participants(server, clients, s.participation);

    std::size_t mark = server.transcript.messages.size();
    broadcast(server, clients, ids);
    const auto [down, up_broadcast] = bytes_since(server.transcript, mark);
    (void)up_broadcast;

    std::vector<Message> uploads;
    uploads.reserve(ids.size());
    for (std::uint32_t id : ids)
      uploads.push_back(client_local_train(
          client_by_id(clients, id), s, loss_cfg,
          static_cast<std::uint32_t>(r)));

    mark = server.transcript.messages.size();
    aggregate(server, uploads, ids);
    const auto [down_up, up] = bytes_since(server.transcript, mark);
    (void)down_up;

    ev = evaluate(server, clients, test);

    RoundMetrics row;
    row.round = r + 1;
    row.acc_fused = ev.acc_fused;
    row.acc_di = ev.acc_di;
    row.acc_dw = ev.acc_dw;
    double ce = 0.0, di = 0.0, dw = 0.0, al = 0.0;
    for (std::uint32_t id : ids) {
      const ClientState& c = client_by_id(clients, id);
      ce += c.last_ce;
      di += c.last_di_kl;
      dw += c.last_dw_kl;
      al += c.last_alpha;
    }
    const double nk = static_cast<double>(ids.size());
    row.loss_ce = ce / nk;
    row.loss_di_kl = di / nk;
    row.loss_dw_kl = dw / nk;
    row.alpha_t = al / nk;
    row.down_bytes = down;
    row.up_bytes = up;
    out.history.push_back(row);
    if (hooks.after_round) hooks.after_round(r + 1, row);
  }

  out.final_eval = ev;
  return out;
}

std::vector<CommReferencePoint> comm_reference_points() {
  return {
      {"FedSDAF adapter exchange (published)", 2.270},
      {"FedCLIP adapter exchange (published)", 2.010},
      {"FedAvg full-model exchange (published)", 13.650},
      {"logits, if exchanged (published)", 0.003},
  };
}

double logit_traffic_share(std::size_t adapter_params,
                           std::size_t logit_batches, std::size_t n_classes,
                           std::size_t bytes_per_param) {
  const double logit_bytes = static_cast<double>(logit_batches) *
                             static_cast<double>(n_classes) *
                             static_cast<double>(bytes_per_param);
  const double adapter_bytes = 2.0 * static_cast<double>(adapter_params) *
                               static_cast<double>(bytes_per_param);
  if (logit_bytes + adapter_bytes == 0.0) return 0.0;
  return logit_bytes / (logit_bytes + adapter_bytes);
}

CommReport comm_cost_report(const Transcript& t, const model::ModelConfig& cfg,
                            const CommCostModel& cost) {
  CommReport rep;
  std::map<std::size_t, CommRow> rows;
  std::map<std::size_t, std::size_t> broadcasts_in_round;
  for (const Message& m : t.messages) {
    // Registration lands in row 0; wire round r lands in row r+1, matching
    // the metrics history.
    const std::size_t row_idx =
        m.kind == MessageKind::register_client ? 0 : m.round + 1;
    CommRow& row = rows[row_idx];
    row.round = row_idx;
    if (m.direction == Direction::to_client) {
      row.down_bytes += m.byte_length();
      rep.total_down += m.byte_length();
    } else {
      row.up_bytes += m.byte_length();
      rep.total_up += m.byte_length();
    }
    if (m.kind == MessageKind::broadcast) ++broadcasts_in_round[row_idx];
  }
  if (cost.include_logits) {
    for (auto& [idx, count] : broadcasts_in_round) {
      const std::size_t bytes =
          count * cost.logit_batches * cost.n_classes * cost.bytes_per_param;
      rows[idx].logit_bytes = bytes;
      rep.total_logits += bytes;
    }
  }
  rep.rows.reserve(rows.size());
  for (auto& [idx, row] : rows) rep.rows.push_back(row);
  rep.adapter_params =
      model::insertion_sites(cfg) * model::adapter_param_count(cfg.d_h, cfg.rank);
  rep.logit_share = logit_traffic_share(rep.adapter_params, cost.logit_batches,
                                        cost.n_classes, cost.bytes_per_param);
  return rep;
}

AuditReport audit_transcript(const Transcript& t,
                             const model::ModelConfig& cfg) {
  AuditReport rep;
  rep.messages_checked = t.messages.size();
  auto flag = [&rep](std::size_t i, std::string what) {
    rep.ok = false;
    rep.findings.push_back({i, std::move(what)});
  };
  const std::size_t sites = model::insertion_sites(cfg);
  for (std::size_t i = 0; i < t.messages.size(); ++i) {
    const Message& m = t.messages[i];
    const std::uint8_t kind = static_cast<std::uint8_t>(m.kind);
    if (kind > 2) {
      flag(i, "unknown kind tag " + std::to_string(kind));
      continue;
    }
    switch (m.kind) {
      case MessageKind::register_client:
        if (m.direction != Direction::to_server)
          flag(i, "register message flowing server->client");
        if (m.payload.size() != 8)
          flag(i, "register payload is not a bare sample count (" +
                      std::to_string(m.payload.size()) + " bytes)");
        break;
      case MessageKind::broadcast:
      case MessageKind::upload: {
        const bool is_up = m.kind == MessageKind::upload;
        if (is_up && m.direction != Direction::to_server)
          flag(i, "upload flowing server->client");
        if (!is_up && m.direction != Direction::to_client)
          flag(i, "broadcast flowing client->server");
        try {
          std::vector<model::AdapterParams> bundle =
              decode_adapter_bundle(m.payload.data(), m.payload.size());
          if (bundle.size() != 0 && bundle.size() != sites) {
            flag(i, "adapter bundle holds " + std::to_string(bundle.size()) +
                        " adapters; the protocol allows 0 or " +
                        std::to_string(sites));
            break;
          }
          for (const model::AdapterParams& a : bundle) {
            if (a.w_down.rows() != cfg.d_h || a.w_down.cols() != cfg.rank) {
              flag(i, "adapter dimensions (" + std::to_string(a.w_down.rows()) +
                          "," + std::to_string(a.w_down.cols()) +
                          ") differ from the configured model");
              break;
            }
          }
        } catch (const ParseError& e) {
          flag(i, std::string("payload is not an adapter bundle: ") + e.what());
        }
        break;
      }
    }
  }
  return rep;
}

}  // namespace fedsdaf::fed
