#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fedsdaf/datagen.hpp"
#include "fedsdaf/losses.hpp"
#include "fedsdaf/metrics.hpp"
#include "fedsdaf/model.hpp"
#include "fedsdaf/rng.hpp"

namespace fedsdaf::fed {

// ---------------------------------------------------------------------------
// Wire format.
//
// Every message starts with a fixed 22-byte little-endian header:
//
//   u32 magic        "FSM1"
//   u8  kind         0 = register, 1 = broadcast, 2 = upload
//   u8  direction    0 = client -> server, 1 = server -> client
//   u32 round
//   u32 client_id
//   u64 payload_len
//
// Register payloads carry a u64 sample count.  Broadcast and upload payloads
// carry an adapter bundle: u32 adapter count followed by that many serialized
// adapter blobs (each self-describing, see model::serialize_adapter).

inline constexpr std::uint32_t kWireMagic = 0x314d5346u;  // "FSM1"
inline constexpr std::size_t kHeaderBytes = 22;

enum class MessageKind : std::uint8_t { register_client = 0, broadcast = 1, upload = 2 };
enum class Direction : std::uint8_t { to_server = 0, to_client = 1 };

struct Message {
  MessageKind kind = MessageKind::register_client;
  Direction direction = Direction::to_server;
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  std::vector<std::uint8_t> payload;

  std::size_t byte_length() const { return kHeaderBytes + payload.size(); }
};

std::vector<std::uint8_t> encode_message(const Message& m);
Message decode_message(const std::uint8_t* bytes, std::size_t len);

std::vector<std::uint8_t> encode_adapter_bundle(
    const std::vector<model::AdapterParams>& adapters);
std::vector<model::AdapterParams> decode_adapter_bundle(
    const std::uint8_t* bytes, std::size_t len);

// Append-only log of every message that crossed the simulated network.
struct Transcript {
  std::vector<Message> messages;
  std::size_t total_bytes = 0;

  void record(const Message& m);
  void save(const std::string& path) const;
  static Transcript load(const std::string& path);
  // Human-readable one-line-per-message listing.
  void save_digest(const std::string& path) const;
};

// ---------------------------------------------------------------------------
// Training schedule.

struct TrainSettings {
  std::size_t rounds = 30;
  std::size_t epochs = 3;            // local epochs per round
  std::size_t batch = 32;
  double lr = 0.1;
  double lr_decay = 0.1;             // multiplicative step decay
  double lr_step_fraction = 0.2;     // decay every ceil(fraction * rounds) rounds
  double momentum = 0.0;
  double participation = 1.0;        // fraction of clients sampled per round
};

// Learning rate in effect at a given round under step decay.
double lr_at_round(const TrainSettings& s, std::size_t round);

// ---------------------------------------------------------------------------
// Participants.

struct ClientState {
  std::uint32_t client_id = 0;
  int domain_id = -1;
  data::SampleSet train;
  model::ClientModel m;
  // Momentum buffers, parallel to model::trainable_params order.
  std::vector<std::vector<double>> velocity;
  std::size_t n_samples = 0;
  Rng rng{0};
  // Loss statistics from the most recent local training pass.
  double last_ce = 0.0;
  double last_di_kl = 0.0;
  double last_dw_kl = 0.0;
  double last_alpha = 0.0;
};

struct ServerState {
  // One shared adapter per insertion site.
  std::vector<model::AdapterParams> a_di_global;
  std::uint32_t round = 0;
  std::vector<std::size_t> n_k;      // per-client sample counts, by client_id
  std::vector<double> weights;       // n_k / sum(n_k)
  std::size_t total_samples = 0;
  Transcript transcript;
  Rng rng{0};
};

// a_di_enabled = false leaves the global adapter list empty, so broadcasts
// and uploads carry zero-adapter bundles (the invariant-branch-off ablation).
ServerState server_init(const model::ModelConfig& cfg, Rng rng,
                        bool a_di_enabled = true);

// Registers every client with the server: records sample counts, computes
// aggregation weights, and logs one register message per client.
void register_clients(ServerState& server, std::vector<ClientState>& clients);

// Serializes the global invariant adapters to each participant and installs a
// deep copy into the client model.  Logs one broadcast message per recipient.
void broadcast(ServerState& server, std::vector<ClientState>& clients,
               const std::vector<std::uint32_t>& participants);

// Runs `epochs` local passes of minibatch SGD on the client's own shard and
// returns the upload message carrying its updated invariant adapters.
Message client_local_train(ClientState& c, const TrainSettings& s,
                           const losses::LossConfig& loss_cfg,
                           std::uint32_t round);

// Sample-count-weighted average of the uploaded invariant adapters, taken in
// ascending client id order.  Weights are renormalized over the participants
// actually present this round; a participant without an upload is an error.
void aggregate(ServerState& server, const std::vector<Message>& uploads,
               const std::vector<std::uint32_t>& participants);

struct EvalResult {
  double acc_fused = 0.0;
  double acc_di = 0.0;
  double acc_dw = 0.0;
};

// Accuracy of each branch on a held-out set, averaged over clients: every
// client keeps its own aware branch, with the server's invariant adapters
// installed.
EvalResult evaluate(const ServerState& server,
                    const std::vector<ClientState>& clients,
                    const data::SampleSet& test);

struct RunHooks {
  std::function<void(std::size_t round, const RoundMetrics&)> after_round;
};

struct RunResult {
  std::vector<RoundMetrics> history;
  EvalResult final_eval;
};

// Full federated run: register, then `rounds` iterations of broadcast,
// parallel local training, upload, aggregation, and held-out evaluation.
// history[0] is a pre-training snapshot; row r covers round r-1's work.
RunResult run_rounds(ServerState& server, std::vector<ClientState>& clients,
                     const data::SampleSet& test, const TrainSettings& s,
                     const losses::LossConfig& loss_cfg,
                     const RunHooks& hooks = {});

// ---------------------------------------------------------------------------
// Communication accounting.

struct CommCostModel {
  std::size_t bytes_per_param = 8;
  bool include_logits = false;
  // Logit traffic is modeled per round as one logit matrix per local batch.
  std::size_t logit_batches = 0;
  std::size_t n_classes = 0;
};

struct CommReferencePoint {
  std::string method;
  double mb_per_round;
};

// Published per-round traffic for context alongside the simulated numbers.
std::vector<CommReferencePoint> comm_reference_points();

// Rows align with the metrics history: row 0 holds registration traffic,
// row r+1 holds the messages tagged with wire round r.
struct CommRow {
  std::size_t round = 0;
  std::size_t down_bytes = 0;
  std::size_t up_bytes = 0;
  std::size_t logit_bytes = 0;  // zero unless the cost model enables logits
};

struct CommReport {
  std::vector<CommRow> rows;
  std::size_t total_down = 0;
  std::size_t total_up = 0;
  std::size_t total_logits = 0;
  std::size_t adapter_params = 0;     // parameters exchanged per direction
  double logit_share = 0.0;           // logit bytes / (logit + adapter bytes)
};

CommReport comm_cost_report(const Transcript& t, const model::ModelConfig& cfg,
                            const CommCostModel& cost);

// Fraction of round traffic that logits would contribute if distillation
// signals were exchanged instead of kept local, as parameter count grows.
// Logit traffic per round is batches x classes x bytes_per_param; adapter
// traffic is one download plus one upload of every adapter parameter.
double logit_traffic_share(std::size_t adapter_params, std::size_t logit_batches,
                           std::size_t n_classes, std::size_t bytes_per_param);

// ---------------------------------------------------------------------------
// Privacy audit.

struct AuditFinding {
  std::size_t message_index = 0;
  std::string what;
};

struct AuditReport {
  bool ok = true;
  std::size_t messages_checked = 0;
  std::vector<AuditFinding> findings;
};

// Verifies that nothing beyond the allowed schema ever crossed the wire:
// register payloads are exactly a sample count, broadcast/upload payloads are
// exactly invariant-adapter bundles of the expected dimensions, and no raw
// features, labels, or logits appear anywhere.
AuditReport audit_transcript(const Transcript& t, const model::ModelConfig& cfg);

}  // namespace fedsdaf::fed
