#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "asap/autograd.hpp"
#include "asap/env.hpp"
#include "asap/instance.hpp"
#include "asap/nn.hpp"

namespace asap {

struct PolicyConfig {
  int embed_dim = 128;
  int heads = 8;
  int encoder_layers = 3;
  int ff_dim = 512;
  double clip_c = 10.0;
  int context_extra = 2;  // load and remaining-vehicle count
  bool residual = true;   // skip connections around the encoder sublayers

  void validate() const;
  bool operator==(const PolicyConfig&) const = default;
};

// Trainable weights plus batch-norm running statistics. Forward passes with
// frozen weights are read-only and safe to share across threads.
struct PolicyParams {
  PolicyConfig config;
  ParamStore params;
  ParamStore buffers;  // bn running mean/var, not trainable
};

PolicyParams make_policy(const PolicyConfig& config, uint64_t seed);

enum class BnMode { Train, Eval };

// Batch statistics observed by the encoder's normalization layers, in layer
// order; lets callers fold them into the running averages explicitly (and
// deterministically) instead of mutating shared state mid-forward.
struct BnCapture {
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> vars;
};

void apply_bn_capture(PolicyParams& policy, const BnCapture& capture, double momentum = 0.1);

// Per-instance encoding, computed once per episode and reused by every
// decode step.
struct EncodedGraph {
  Tensor static_emb;  // [N, dim]
  Tensor h_enc;       // [N, dim]
  Tensor c_h;         // [1, dim] graph context
  Tensor g_k, g_v, k_l;  // [N, dim] glimpse keys/values and pointer keys
};

// Embeds static node features only: depot from (x, y), customers from
// (x, y, demand). End-times reach the policy solely through the urgency
// rescaling in the decoder.
Tensor embed_nodes(Tape& tape, const PolicyParams& policy, const Instance& instance);

EncodedGraph encode(Tape& tape, const PolicyParams& policy, const Instance& instance,
                    BnMode mode, BnCapture* capture = nullptr);

// A batch of decision points of one instance: `steps` states, each holding
// all trajectories. Rows are flattened [step * traj].
struct StateBatch {
  int steps = 0;
  int traj = 0;
  int nodes = 0;
  std::vector<int64_t> current;     // [steps*traj]
  std::vector<double> load;         // [steps*traj]
  std::vector<double> vehicles;     // [steps*traj]
  std::vector<uint8_t> infeasible;  // [steps*traj*nodes], 1 = not selectable
  std::vector<double> urgency_add;  // [steps*traj*nodes], clamped to [0,1]

  void append(const EnvState& state);
  size_t rows() const { return static_cast<size_t>(steps) * traj; }
};

struct DecodeOut {
  Tensor logits;   // [steps*traj, nodes]; infeasible entries are -inf
  Tensor glimpse;  // [steps*traj, dim]
};

DecodeOut decode_step(Tape& tape, const PolicyParams& policy, const EncodedGraph& enc,
                      const StateBatch& batch);

// Two-layer value head over the decoder glimpse. Returns [steps*traj].
Tensor critic_value(Tape& tape, const PolicyParams& policy, const Tensor& glimpse);

enum class ActMode { Sample, Greedy };

std::vector<CategoricalDraw> act(const Tensor& logits, ActMode mode, Rng& rng);

// One completed episode over `num_traj = customer` POMO trajectories.
// Time-major records; `included[t][k]` is false for the forced first step
// and for frozen post-termination padding.
struct EpisodeRecord {
  int traj = 0;
  std::vector<std::vector<int>> actions;
  std::vector<std::vector<double>> log_probs;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> rewards;
  std::vector<std::vector<double>> entropies;
  std::vector<std::vector<uint8_t>> dones;
  std::vector<std::vector<uint8_t>> included;
  std::vector<std::vector<double>> logits_trace;  // [t][traj*nodes] when traced
  EnvState final_state;
  int encode_count = 0;

  std::vector<double> episode_returns() const;
};

struct RolloutOptions {
  double penalty = 10.0;
  int step_cap = 0;  // 0 = 4 * (nodes + fleet)
  BnMode bn_mode = BnMode::Eval;
  BnCapture* bn_capture = nullptr;
  bool record_trace = false;
};

EpisodeRecord rollout_episode(const Instance& instance, const PolicyParams& policy,
                              ActMode mode, Rng& rng, const RolloutOptions& options = {});

}  // namespace asap
