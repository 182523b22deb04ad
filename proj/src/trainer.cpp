#include "asap/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <thread>

#include "asap/baselines.hpp"
#include "asap/errors.hpp"
#include "asap/io.hpp"
#include "json.hpp"

namespace asap {

using nlohmann::json;

void TrainConfig::validate() const {
  if (nodes < 1) throw ConfigError("nodes must be >= 1");
  if (num_envs < 1) throw ConfigError("num_envs must be >= 1");
  if (minibatches < 1 || num_envs % minibatches != 0)
    throw ConfigError("num_envs " + std::to_string(num_envs) +
                      " must be divisible by minibatches " + std::to_string(minibatches));
  if (steps_per_rollout < 2) throw ConfigError("steps_per_rollout must be >= 2");
  if (global_updates < 1) throw ConfigError("global_updates must be >= 1");
  if (update_epochs < 1) throw ConfigError("update_epochs must be >= 1");
  if (gamma <= 0.0 || gamma > 1.0) throw ConfigError("gamma must lie in (0, 1]");
  if (gae_lambda < 0.0 || gae_lambda > 1.0) throw ConfigError("gae_lambda must lie in [0, 1]");
  if (clip_coef <= 0.0) throw ConfigError("clip_coef must be positive");
  if (ent_coef < 0.0 || vf_coef < 0.0) throw ConfigError("loss coefficients must be >= 0");
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (penalty < 0.0) throw ConfigError("penalty must be >= 0");
  if (num_traj != nodes)
    throw ConfigError("POMO requires num_traj == nodes (" + std::to_string(num_traj) +
                      " != " + std::to_string(nodes) + ")");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (eval_instances < 1) throw ConfigError("eval_instances must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  gen.validate();
}

void compute_gae(int T, int rows, const double* rewards, const double* values,
                 const uint8_t* dones, const double* next_values, double gamma, double lam,
                 double* advantages, double* returns) {
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int t = T - 1; t >= 0; --t) {
      const size_t i = static_cast<size_t>(t) * rows + r;
      if (dones[i]) {
        acc = rewards[i] - values[i];
      } else {
        const double v_next =
            t == T - 1 ? next_values[r] : values[static_cast<size_t>(t + 1) * rows + r];
        const double delta = rewards[i] + gamma * v_next - values[i];
        acc = delta + gamma * lam * acc;
      }
      advantages[i] = acc;
      returns[i] = acc + values[i];
    }
  }
}

void compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                 const std::vector<uint8_t>& dones, double next_value, double gamma, double lam,
                 std::vector<double>& advantages, std::vector<double>& returns) {
  const int T = static_cast<int>(rewards.size());
  if (values.size() != rewards.size() || dones.size() != rewards.size())
    throw ShapeError("compute_gae: series lengths differ");
  advantages.assign(T, 0.0);
  returns.assign(T, 0.0);
  compute_gae(T, 1, rewards.data(), values.data(), dones.data(), &next_value, gamma, lam,
              advantages.data(), returns.data());
}

// ---------------------------------------------------------------------------
// Rollout collection

namespace {

struct EnvSlot {
  Rng act_rng{0};
  uint64_t episode_count = 0;
  std::shared_ptr<const Instance> instance;
  EnvState state;
  EncodedGraph enc;
  int ep_steps = 0;
  std::vector<BnCapture> pending_bn;

  // Completed-episode statistics for the current rollout.
  double sum_return = 0.0, sum_dist = 0.0, sum_served = 0.0, sum_veh = 0.0;
  long completed = 0;
  std::vector<double> ep_return;  // per trajectory, current episode
};

uint64_t instance_seed(const TrainConfig& cfg, int env, uint64_t episode) {
  return Rng::derive(Rng::derive(cfg.seed ^ 0xC2B2AE3D27D4EB4FULL, env), episode);
}

void start_episode(EnvSlot& slot, const PolicyParams& policy, const TrainConfig& cfg, int env) {
  slot.instance = std::make_shared<const Instance>(
      generate_instance(cfg.nodes, instance_seed(cfg, env, slot.episode_count), cfg.gen));
  slot.episode_count += 1;
  Tape tape(/*grad_enabled=*/false);
  BnCapture cap;
  slot.enc = encode(tape, policy, *slot.instance, BnMode::Train, &cap);
  slot.pending_bn.push_back(std::move(cap));
  slot.state = reset(slot.instance, cfg.num_traj, cfg.penalty);
  slot.ep_steps = 0;
  slot.ep_return.assign(cfg.num_traj, 0.0);
}

void finish_episode_stats(EnvSlot& slot) {
  const EnvState& s = slot.state;
  const Instance& inst = *slot.instance;
  for (int k = 0; k < s.num_traj; ++k) {
    double served = 0.0;
    for (int node : s.visit_order[k])
      if (node != 0) served += inst.demand[node];
    slot.sum_return += slot.ep_return[k];
    slot.sum_dist += s.fleet_distance[k];
    slot.sum_served += served;
    slot.sum_veh += inst.fleet_size - s.vehicles_remaining[k];
    slot.completed += 1;
  }
}

double logp_of_row(const double* row, int64_t n, int action) {
  double m = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < n; ++j) m = std::max(m, row[j]);
  double s = 0.0;
  for (int64_t j = 0; j < n; ++j)
    if (row[j] != -std::numeric_limits<double>::infinity()) s += std::exp(row[j] - m);
  return row[action] - (m + std::log(s));
}

void rollout_env(EnvSlot& slot, int e, const PolicyParams& policy, const TrainConfig& cfg,
                 RolloutBuffer& buf, std::vector<RolloutBuffer::Segment>& segments) {
  const int T = cfg.steps_per_rollout;
  const int traj = cfg.num_traj;
  const int n = cfg.nodes + 1;
  int seg_begin = 0;

  for (int t = 0; t < T; ++t) {
    if (!slot.instance || slot.state.all_done()) {
      if (slot.instance && t > seg_begin)
        segments.push_back({e, seg_begin, t, slot.instance});
      seg_begin = t;
      start_episode(slot, policy, cfg, e);
    }

    StateBatch batch;
    batch.append(slot.state);
    // Snapshot the decision-point state for the update-phase re-decode.
    for (int k = 0; k < traj; ++k) {
      const size_t r = buf.row(t, e, k);
      buf.cur[r] = batch.current[k];
      buf.load[r] = batch.load[k];
      buf.veh[r] = batch.vehicles[k];
      std::copy(batch.infeasible.begin() + k * n, batch.infeasible.begin() + (k + 1) * n,
                buf.infeasible.begin() + r * n);
      std::copy(batch.urgency_add.begin() + k * n, batch.urgency_add.begin() + (k + 1) * n,
                buf.urgency_add.begin() + r * n);
    }

    Tape tape(/*grad_enabled=*/false);
    DecodeOut dec = decode_step(tape, policy, slot.enc, batch);
    Tensor values = critic_value(tape, policy, dec.glimpse);

    std::vector<int> actions(traj);
    std::vector<double> logp(traj), ent(traj, 0.0);
    std::vector<uint8_t> live(traj);
    for (int k = 0; k < traj; ++k) live[k] = slot.state.done[k] ? 0 : 1;

    if (slot.ep_steps == 0) {
      const auto forced = force_pomo_starts(slot.state);
      for (int k = 0; k < traj; ++k) {
        actions[k] = forced[k];
        logp[k] = logp_of_row(dec.logits.data() + k * n, n, actions[k]);
      }
    } else {
      const auto draws = act(dec.logits, ActMode::Sample, slot.act_rng);
      for (int k = 0; k < traj; ++k) {
        actions[k] = static_cast<int>(draws[k].index);
        logp[k] = draws[k].log_prob;
        ent[k] = draws[k].entropy;
      }
    }

    const StepOutcome out = step(slot.state, actions);
    for (int k = 0; k < traj; ++k) {
      const size_t r = buf.row(t, e, k);
      buf.actions[r] = actions[k];
      buf.log_probs[r] = logp[k];
      buf.values[r] = values.data()[k];
      buf.rewards[r] = out.reward[k];
      buf.entropies[r] = ent[k];
      buf.dones[r] = out.done[k];
      buf.included[r] = (slot.ep_steps > 0 && live[k]) ? 1 : 0;
      slot.ep_return[k] += out.reward[k];
    }
    slot.ep_steps += 1;
    if (slot.state.all_done()) finish_episode_stats(slot);
  }
  segments.push_back({e, seg_begin, T, slot.instance});

  // Bootstrap values for trajectories still running at the rollout horizon.
  if (!slot.state.all_done()) {
    StateBatch batch;
    batch.append(slot.state);
    Tape tape(/*grad_enabled=*/false);
    DecodeOut dec = decode_step(tape, policy, slot.enc, batch);
    Tensor values = critic_value(tape, policy, dec.glimpse);
    for (int k = 0; k < traj; ++k)
      buf.next_values[static_cast<size_t>(e) * traj + k] =
          slot.state.done[k] ? 0.0 : values.data()[k];
  } else {
    for (int k = 0; k < traj; ++k) buf.next_values[static_cast<size_t>(e) * traj + k] = 0.0;
  }
}

}  // namespace

struct RolloutCollector::Impl {
  TrainConfig cfg;
  std::vector<EnvSlot> slots;
};

RolloutCollector::RolloutCollector(const TrainConfig& config)
    : impl_(std::make_unique<Impl>()) {
  config.validate();
  impl_->cfg = config;
  impl_->slots.resize(config.num_envs);
  for (int e = 0; e < config.num_envs; ++e)
    impl_->slots[e].act_rng = Rng(Rng::derive(config.seed, 0xE000 + e));
}

RolloutCollector::~RolloutCollector() = default;
RolloutCollector::RolloutCollector(RolloutCollector&&) noexcept = default;

RolloutCollector::Stats RolloutCollector::last_stats() const {
  Stats s;
  double ret = 0.0, dist = 0.0, served = 0.0, veh = 0.0;
  for (const auto& slot : impl_->slots) {
    ret += slot.sum_return;
    dist += slot.sum_dist;
    served += slot.sum_served;
    veh += slot.sum_veh;
    s.episodes += slot.completed;
  }
  if (s.episodes > 0) {
    const double inv = 1.0 / static_cast<double>(s.episodes);
    s.mean_return = ret * inv;
    s.mean_distance = dist * inv;
    s.mean_served = served * inv;
    s.mean_vehicles = veh * inv;
  }
  return s;
}

void RolloutCollector::collect(PolicyParams& policy, RolloutBuffer& buf) {
  const TrainConfig& cfg = impl_->cfg;
  std::vector<EnvSlot>& slots = impl_->slots;
  const int T = cfg.steps_per_rollout, E = cfg.num_envs, traj = cfg.num_traj;
  const int n = cfg.nodes + 1;
  buf.T = T;
  buf.E = E;
  buf.traj = traj;
  buf.nodes = n;
  const size_t rows = buf.rows();
  buf.actions.assign(rows, 0);
  buf.log_probs.assign(rows, 0.0);
  buf.values.assign(rows, 0.0);
  buf.rewards.assign(rows, 0.0);
  buf.entropies.assign(rows, 0.0);
  buf.dones.assign(rows, 0);
  buf.included.assign(rows, 0);
  buf.advantages.assign(rows, 0.0);
  buf.returns.assign(rows, 0.0);
  buf.next_values.assign(static_cast<size_t>(E) * traj, 0.0);
  buf.cur.assign(rows, 0);
  buf.load.assign(rows, 0.0);
  buf.veh.assign(rows, 0.0);
  buf.infeasible.assign(rows * n, 0);
  buf.urgency_add.assign(rows * n, 0.0);
  buf.segments.clear();

  for (auto& slot : slots) {
    slot.sum_return = slot.sum_dist = slot.sum_served = slot.sum_veh = 0.0;
    slot.completed = 0;
  }

  // Environments write disjoint buffer slices; per-env segment lists keep
  // the merge order deterministic regardless of thread count.
  std::vector<std::vector<RolloutBuffer::Segment>> env_segments(E);
  const int workers = std::min(cfg.threads, E);
  if (workers <= 1) {
    for (int e = 0; e < E; ++e) rollout_env(slots[e], e, policy, cfg, buf, env_segments[e]);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        for (int e = w; e < E; e += workers)
          rollout_env(slots[e], e, policy, cfg, buf, env_segments[e]);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (int e = 0; e < E; ++e)
    buf.segments.insert(buf.segments.end(), env_segments[e].begin(), env_segments[e].end());

  // Fold captured batch statistics into the running averages in env order.
  for (auto& slot : slots) {
    for (const BnCapture& cap : slot.pending_bn) apply_bn_capture(policy, cap, cfg.bn_momentum);
    slot.pending_bn.clear();
  }

  compute_gae(T, E * traj, buf.rewards.data(), buf.values.data(), buf.dones.data(),
              buf.next_values.data(), cfg.gamma, cfg.gae_lambda, buf.advantages.data(),
              buf.returns.data());
  buf.finalized = true;
}

// ---------------------------------------------------------------------------
// PPO update

namespace {

struct SegmentStats {
  double policy = 0.0, value = 0.0, entropy = 0.0, kl = 0.0;
  double clip_count = 0.0;
  double max_ratio_dev = 0.0;
  bool finite = true;
};

struct MinibatchScratch {
  std::vector<const RolloutBuffer::Segment*> segments;
  double adv_mean = 0.0, adv_std = 1.0;
  long included = 0;
};

SegmentStats process_segment(const RolloutBuffer& buf, const RolloutBuffer::Segment& seg,
                             PolicyParams& policy, const TrainConfig& cfg,
                             const MinibatchScratch& mb, GradSink& sink) {
  const int traj = buf.traj, n = buf.nodes;
  const int S = seg.t_end - seg.t_begin;
  const size_t rows = static_cast<size_t>(S) * traj;

  Tape tape(/*grad_enabled=*/true);
  tape.set_leaf_sink(&sink);
  EncodedGraph enc = encode(tape, policy, *seg.instance, BnMode::Train, nullptr);

  StateBatch batch;
  batch.steps = S;
  batch.traj = traj;
  batch.nodes = n;
  batch.current.resize(rows);
  batch.load.resize(rows);
  batch.vehicles.resize(rows);
  batch.infeasible.resize(rows * n);
  batch.urgency_add.resize(rows * n);
  std::vector<int64_t> actions(rows);
  std::vector<double> old_logp(rows), adv(rows), target(rows), w(rows), w_half(rows);

  size_t out = 0;
  for (int t = seg.t_begin; t < seg.t_end; ++t) {
    for (int k = 0; k < traj; ++k, ++out) {
      const size_t r = buf.row(t, seg.env, k);
      batch.current[out] = buf.cur[r];
      batch.load[out] = buf.load[r];
      batch.vehicles[out] = buf.veh[r];
      std::copy(buf.infeasible.begin() + r * n, buf.infeasible.begin() + (r + 1) * n,
                batch.infeasible.begin() + out * n);
      std::copy(buf.urgency_add.begin() + r * n, buf.urgency_add.begin() + (r + 1) * n,
                batch.urgency_add.begin() + out * n);
      const bool inc = buf.included[r] != 0;
      if (inc) {
        actions[out] = buf.actions[r];
        old_logp[out] = buf.log_probs[r];
      } else {
        // Zero-weight rows (forced POMO starts, frozen padding) may carry
        // -inf log-probabilities, e.g. a forced start onto an expired
        // customer. Substitute a finite feasible placeholder so the
        // 0-weighted loss terms stay finite instead of producing inf*0.
        int64_t safe = 0;
        for (int j = 0; j < n; ++j)
          if (!batch.infeasible[out * n + j]) {
            safe = j;
            break;
          }
        actions[out] = safe;
        old_logp[out] = 0.0;
      }
      const double a = cfg.adv_norm
                           ? (buf.advantages[r] - mb.adv_mean) / (mb.adv_std + 1e-8)
                           : buf.advantages[r];
      adv[out] = inc ? a : 0.0;
      target[out] = inc ? (cfg.value_target == TrainConfig::ValueTarget::Returns
                               ? buf.returns[r]
                               : buf.values[r])
                        : 0.0;
      w[out] = inc ? 1.0 / static_cast<double>(mb.included) : 0.0;
      w_half[out] = 0.5 * w[out];
    }
  }

  DecodeOut dec = decode_step(tape, policy, enc, batch);
  Tensor logp_all = tape.masked_log_softmax(dec.logits, batch.infeasible);
  Tensor logp_a = tape.gather_cols(logp_all, actions);
  Tensor entropy = tape.row_entropy(logp_all, batch.infeasible);
  Tensor v_new = critic_value(tape, policy, dec.glimpse);

  Tensor diff = tape.add_const(logp_a, [&] {
    std::vector<double> neg(rows);
    for (size_t i = 0; i < rows; ++i) neg[i] = -old_logp[i];
    return neg;
  }());
  Tensor ratio = cfg.ratio_mode == TrainConfig::RatioMode::NewMinusOld
                     ? tape.exp_(diff)
                     : tape.exp_(tape.scale(diff, -1.0));

  std::vector<double> neg_adv(rows);
  for (size_t i = 0; i < rows; ++i) neg_adv[i] = -adv[i];
  Tensor neg_adv_t = Tensor::from({static_cast<int64_t>(rows)}, neg_adv);
  Tensor pg = tape.maximum(
      tape.mul(ratio, neg_adv_t),
      tape.mul(tape.clamp(ratio, 1.0 - cfg.clip_coef, 1.0 + cfg.clip_coef), neg_adv_t));
  Tensor policy_loss = tape.dot_const(pg, w);
  Tensor entropy_mean = tape.dot_const(entropy, w);

  std::vector<double> neg_target(rows);
  for (size_t i = 0; i < rows; ++i) neg_target[i] = -target[i];
  Tensor vdiff = tape.add_const(v_new, neg_target);
  Tensor value_loss = tape.dot_const(tape.mul(vdiff, vdiff), w_half);

  Tensor loss = tape.add(tape.add(policy_loss, tape.scale(entropy_mean, -cfg.ent_coef)),
                         tape.scale(value_loss, cfg.vf_coef));

  SegmentStats st;
  st.policy = policy_loss.item();
  st.value = value_loss.item();
  st.entropy = entropy_mean.item();
  st.finite = std::isfinite(loss.item());
  for (size_t i = 0; i < rows; ++i) {
    if (w[i] == 0.0) continue;
    const double rho = ratio.data()[i];
    const double dev = std::abs(rho - 1.0);
    st.max_ratio_dev = std::max(st.max_ratio_dev, dev);
    if (dev > cfg.clip_coef) st.clip_count += 1.0;
    st.kl += ((rho - 1.0) - std::log(rho)) * w[i];
  }
  if (st.finite) tape.backward(loss);
  return st;
}

}  // namespace

LossReport ppo_update(const RolloutBuffer& buf, PolicyParams& policy, AdamState& opt,
                      const TrainConfig& cfg, Rng& shuffle_rng,
                      const std::filesystem::path& diagnostics_dir) {
  if (!buf.finalized) throw ContractError("ppo_update: buffer not finalized");
  const int E = buf.E, traj = buf.traj;
  const int envs_per_mb = E / cfg.minibatches;

  // env -> segments map
  std::vector<std::vector<const RolloutBuffer::Segment*>> by_env(E);
  for (const auto& seg : buf.segments) by_env[seg.env].push_back(&seg);

  std::vector<int> env_order(E);
  for (int e = 0; e < E; ++e) env_order[e] = e;

  LossReport report;
  int mb_count = 0;
  for (int epoch = 0; epoch < cfg.update_epochs; ++epoch) {
    // Fisher-Yates with the portable generator; std::shuffle is
    // implementation-defined.
    for (int i = E - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.uniform_int(0, i));
      std::swap(env_order[i], env_order[j]);
    }
    for (int mb = 0; mb < cfg.minibatches; ++mb) {
      MinibatchScratch scratch;
      double sum = 0.0, sumsq = 0.0;
      for (int i = 0; i < envs_per_mb; ++i) {
        const int e = env_order[mb * envs_per_mb + i];
        for (const auto* seg : by_env[e]) scratch.segments.push_back(seg);
        for (int t = 0; t < buf.T; ++t)
          for (int k = 0; k < traj; ++k) {
            const size_t r = buf.row(t, e, k);
            if (!buf.included[r]) continue;
            scratch.included += 1;
            sum += buf.advantages[r];
            sumsq += buf.advantages[r] * buf.advantages[r];
          }
      }
      if (scratch.included == 0)
        throw ContractError("ppo_update: minibatch without any learnable sample");
      scratch.adv_mean = sum / static_cast<double>(scratch.included);
      scratch.adv_std = std::sqrt(
          std::max(0.0, sumsq / static_cast<double>(scratch.included) -
                            scratch.adv_mean * scratch.adv_mean));

      const size_t nseg = scratch.segments.size();
      std::vector<SegmentStats> stats(nseg);
      const int workers = std::max(1, std::min<int>(cfg.threads, static_cast<int>(nseg)));
      std::vector<GradSink> sinks(workers);
      if (workers <= 1) {
        for (size_t si = 0; si < nseg; ++si)
          stats[si] =
              process_segment(buf, *scratch.segments[si], policy, cfg, scratch, sinks[0]);
      } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
          pool.emplace_back([&, w]() {
            for (size_t si = w; si < nseg; si += workers)
              stats[si] =
                  process_segment(buf, *scratch.segments[si], policy, cfg, scratch, sinks[w]);
          });
        }
        for (auto& th : pool) th.join();
      }

      SegmentStats total;
      for (const auto& st : stats) {
        total.policy += st.policy;
        total.value += st.value;
        total.entropy += st.entropy;
        total.kl += st.kl;
        total.clip_count += st.clip_count;
        total.max_ratio_dev = std::max(total.max_ratio_dev, st.max_ratio_dev);
        total.finite = total.finite && st.finite;
      }
      if (!total.finite) {
        if (!diagnostics_dir.empty()) {
          json diag = {{"stage", "ppo_update"},
                       {"epoch", epoch},
                       {"minibatch", mb},
                       {"policy_loss", total.policy},
                       {"value_loss", total.value},
                       {"entropy", total.entropy}};
          atomic_write_text(diagnostics_dir / "diagnostics.json", diag.dump(2) + "\n");
        }
        throw NumericError("non-finite loss in PPO update (epoch " + std::to_string(epoch) +
                           ", minibatch " + std::to_string(mb) + ")");
      }

      // Merge per-thread gradients in a fixed order, then step.
      for (const auto& [name, handle] : policy.params.items()) {
        Tensor t = handle;
        auto& g = t.grad();
        for (auto& sink : sinks) {
          if (const std::vector<double>* part = sink.find(t.raw())) {
            for (size_t i = 0; i < g.size(); ++i) g[i] += (*part)[i];
          }
        }
      }
      clip_grad_norm(policy.params, cfg.grad_clip);
      optimizer_step(policy.params, opt, cfg.learning_rate);
      report.optimizer_steps += 1;

      report.policy_loss += total.policy;
      report.value_loss += total.value;
      report.entropy += total.entropy;
      report.approx_kl += total.kl;
      report.clip_fraction += total.clip_count / static_cast<double>(scratch.included);
      if (epoch == 0 && mb == 0) {
        report.first_mb_max_ratio_dev = total.max_ratio_dev;
        report.first_mb_clip_fraction = total.clip_count / static_cast<double>(scratch.included);
      }
      mb_count += 1;
    }
  }
  const double inv = 1.0 / static_cast<double>(mb_count);
  report.policy_loss *= inv;
  report.value_loss *= inv;
  report.entropy *= inv;
  report.approx_kl *= inv;
  report.clip_fraction *= inv;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[8] = {'A', 'S', 'A', 'P', 'C', 'K', 'P', '1'};
constexpr char kFooter[8] = {'A', 'S', 'A', 'P', 'E', 'N', 'D', '\n'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > buf.size()) throw IncompatibleError("truncated checkpoint file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

json policy_config_json(const PolicyConfig& c) {
  return {{"embed_dim", c.embed_dim}, {"heads", c.heads},
          {"encoder_layers", c.encoder_layers}, {"ff_dim", c.ff_dim},
          {"clip_c", c.clip_c}, {"context_extra", c.context_extra},
          {"residual", c.residual}};
}

PolicyConfig policy_config_from_json(const json& j) {
  PolicyConfig c;
  c.embed_dim = j.at("embed_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.clip_c = j.at("clip_c").get<double>();
  c.context_extra = j.at("context_extra").get<int>();
  c.residual = j.at("residual").get<bool>();
  return c;
}

json train_config_json(const TrainConfig& c) {
  return {{"nodes", c.nodes},
          {"num_envs", c.num_envs},
          {"steps_per_rollout", c.steps_per_rollout},
          {"global_updates", c.global_updates},
          {"minibatches", c.minibatches},
          {"update_epochs", c.update_epochs},
          {"gamma", c.gamma},
          {"gae_lambda", c.gae_lambda},
          {"clip_coef", c.clip_coef},
          {"ent_coef", c.ent_coef},
          {"vf_coef", c.vf_coef},
          {"learning_rate", c.learning_rate},
          {"penalty", c.penalty},
          {"num_traj", c.num_traj},
          {"eval_every", c.eval_every},
          {"eval_instances", c.eval_instances},
          {"seed", c.seed},
          {"adv_norm", c.adv_norm},
          {"value_target", c.value_target == TrainConfig::ValueTarget::Returns ? "returns" : "old_values"},
          {"ratio_mode", c.ratio_mode == TrainConfig::RatioMode::NewMinusOld ? "new_minus_old" : "old_minus_new"},
          {"grad_clip", c.grad_clip},
          {"bn_momentum", c.bn_momentum},
          {"gen",
           {{"fleet_size", c.gen.fleet_size},
            {"capacity_raw", c.gen.capacity_raw},
            {"max_raw_demand", c.gen.max_raw_demand},
            {"end_time_min", c.gen.end_time_min},
            {"end_time_max", c.gen.end_time_max},
            {"depot_end_time", c.gen.depot_end_time},
            {"speed", c.gen.speed}}}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.nodes = j.at("nodes").get<int>();
  c.num_envs = j.at("num_envs").get<int>();
  c.steps_per_rollout = j.at("steps_per_rollout").get<int>();
  c.global_updates = j.at("global_updates").get<int>();
  c.minibatches = j.at("minibatches").get<int>();
  c.update_epochs = j.at("update_epochs").get<int>();
  c.gamma = j.at("gamma").get<double>();
  c.gae_lambda = j.at("gae_lambda").get<double>();
  c.clip_coef = j.at("clip_coef").get<double>();
  c.ent_coef = j.at("ent_coef").get<double>();
  c.vf_coef = j.at("vf_coef").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.penalty = j.at("penalty").get<double>();
  c.num_traj = j.at("num_traj").get<int>();
  c.eval_every = j.at("eval_every").get<int>();
  c.eval_instances = j.at("eval_instances").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.adv_norm = j.at("adv_norm").get<bool>();
  c.value_target = j.at("value_target").get<std::string>() == "returns"
                       ? TrainConfig::ValueTarget::Returns
                       : TrainConfig::ValueTarget::OldValues;
  c.ratio_mode = j.at("ratio_mode").get<std::string>() == "new_minus_old"
                     ? TrainConfig::RatioMode::NewMinusOld
                     : TrainConfig::RatioMode::OldMinusNew;
  c.grad_clip = j.at("grad_clip").get<double>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  const json& g = j.at("gen");
  c.gen.fleet_size = g.at("fleet_size").get<int>();
  c.gen.capacity_raw = g.at("capacity_raw").get<double>();
  c.gen.max_raw_demand = g.at("max_raw_demand").get<int>();
  c.gen.end_time_min = g.at("end_time_min").get<double>();
  c.gen.end_time_max = g.at("end_time_max").get<double>();
  c.gen.depot_end_time = g.at("depot_end_time").get<double>();
  c.gen.speed = g.at("speed").get<double>();
  return c;
}

void append_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out += name;
  put_u32(out, static_cast<uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) put_u64(out, static_cast<uint64_t>(t.dim(i)));
  for (double v : t.values()) put_f64(out, v);
}

}  // namespace

void save_checkpoint(const PolicyParams& policy, const TrainConfig& config, int update,
                     const std::filesystem::path& path) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, kVersion);
  const std::string header = json{{"policy", policy_config_json(policy.config)},
                                  {"train", train_config_json(config)},
                                  {"update", update}}
                                 .dump();
  put_u64(out, header.size());
  out += header;
  put_u32(out, static_cast<uint32_t>(policy.params.size() + policy.buffers.size()));
  for (const auto& [name, t] : policy.params.items()) append_tensor(out, name, t);
  for (const auto& [name, t] : policy.buffers.items()) append_tensor(out, name, t);
  out.append(kFooter, 8);
  atomic_write_text(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  Reader rd{raw};
  if (rd.bytes(8) != std::string(kMagic, 8))
    throw IncompatibleError(path.string() + ": not a checkpoint file (bad magic)");
  const uint32_t version = rd.u32();
  if (version != kVersion)
    throw IncompatibleError(path.string() + ": checkpoint format version " +
                            std::to_string(version) + ", expected " + std::to_string(kVersion));
  const uint64_t hlen = rd.u64();
  json header;
  try {
    header = json::parse(rd.bytes(hlen));
  } catch (const json::exception& e) {
    throw IncompatibleError(path.string() + ": corrupt checkpoint header: " + e.what());
  }

  Checkpoint ck;
  try {
    ck.train = train_config_from_json(header.at("train"));
    ck.update = header.at("update").get<int>();
    ck.policy = make_policy(policy_config_from_json(header.at("policy")), /*seed=*/0);
  } catch (const json::exception& e) {
    throw IncompatibleError(path.string() + ": corrupt checkpoint header: " + e.what());
  }

  const uint32_t count = rd.u32();
  if (count != ck.policy.params.size() + ck.policy.buffers.size())
    throw IncompatibleError(path.string() + ": tensor count mismatch");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = rd.u32();
    const std::string name = rd.bytes(name_len);
    const uint32_t ndim = rd.u32();
    Shape shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int64_t>(rd.u64());
    Tensor* dst = nullptr;
    if (ck.policy.params.contains(name))
      dst = &ck.policy.params.at(name);
    else if (ck.policy.buffers.contains(name))
      dst = &ck.policy.buffers.at(name);
    else
      throw IncompatibleError(path.string() + ": unknown tensor '" + name + "'");
    if (dst->shape() != shape)
      throw IncompatibleError(path.string() + ": tensor '" + name + "' has shape " +
                              shape_str(shape) + ", expected " + shape_str(dst->shape()));
    for (auto& v : dst->values()) v = rd.f64();
  }
  if (rd.bytes(8) != std::string(kFooter, 8))
    throw IncompatibleError(path.string() + ": missing checkpoint footer");
  return ck;
}

void check_compatible(const PolicyConfig& checkpoint, const PolicyConfig& runtime) {
  auto fail = [](const std::string& field, auto a, auto b) {
    std::ostringstream os;
    os << "incompatible checkpoint: " << field << " is " << a << " in checkpoint but " << b
       << " at runtime";
    throw IncompatibleError(os.str());
  };
  if (checkpoint.embed_dim != runtime.embed_dim)
    fail("embed_dim", checkpoint.embed_dim, runtime.embed_dim);
  if (checkpoint.heads != runtime.heads) fail("heads", checkpoint.heads, runtime.heads);
  if (checkpoint.encoder_layers != runtime.encoder_layers)
    fail("encoder_layers", checkpoint.encoder_layers, runtime.encoder_layers);
  if (checkpoint.ff_dim != runtime.ff_dim) fail("ff_dim", checkpoint.ff_dim, runtime.ff_dim);
  if (checkpoint.clip_c != runtime.clip_c) fail("clip_c", checkpoint.clip_c, runtime.clip_c);
  if (checkpoint.residual != runtime.residual)
    fail("residual", checkpoint.residual, runtime.residual);
}

// ---------------------------------------------------------------------------
// Training loop

EvalStats evaluate_policy(const PolicyParams& policy, const TrainConfig& config) {
  EvalStats stats;
  for (int i = 0; i < config.eval_instances; ++i) {
    const Instance inst = generate_instance(config.nodes, 4321 + i, config.gen);
    const Solution sol = solve_with_policy(inst, policy, ActMode::Greedy, config.penalty);
    stats.mean_objective += sol.objective;
    stats.mean_distance += sol.total_distance;
    stats.mean_served += sol.served_demand;
  }
  const double inv = 1.0 / config.eval_instances;
  stats.mean_objective *= inv;
  stats.mean_distance *= inv;
  stats.mean_served *= inv;
  return stats;
}

TrainResult train(const TrainConfig& config, const PolicyConfig& policy_config,
                  const std::filesystem::path& out_dir) {
  config.validate();
  policy_config.validate();
  std::filesystem::create_directories(out_dir);

  PolicyParams policy = make_policy(policy_config, config.seed);
  AdamState opt;
  Rng shuffle_rng(Rng::derive(config.seed, 0x5157));
  RolloutCollector collector(config);

  TrainResult result;
  result.metrics_path = out_dir / "metrics.csv";
  result.eval_path = out_dir / "eval.csv";
  result.checkpoint_path = out_dir / "ckpt_final.bin";

  std::ostringstream metrics;
  metrics << "update,mean_return,mean_distance,mean_served_demand,mean_vehicles_used,"
             "policy_loss,value_loss,entropy,clip_fraction,approx_kl,wallclock_s\n";
  std::ostringstream evals;
  evals << "update,mean_objective,mean_distance,mean_served\n";

  const EvalStats untrained = evaluate_policy(policy, config);
  result.untrained_eval_objective = untrained.mean_objective;
  evals << 0 << "," << untrained.mean_objective << "," << untrained.mean_distance << ","
        << untrained.mean_served << "\n";
  std::cout << "eval @0: objective " << untrained.mean_objective << "\n";

  const auto t0 = std::chrono::steady_clock::now();
  RolloutBuffer buffer;
  for (int u = 1; u <= config.global_updates; ++u) {
    collector.collect(policy, buffer);
    LossReport report;
    try {
      report = ppo_update(buffer, policy, opt, config, shuffle_rng, out_dir);
    } catch (const NumericError&) {
      atomic_write_text(result.metrics_path, metrics.str());
      atomic_write_text(result.eval_path, evals.str());
      throw;
    }

    const RolloutCollector::Stats st = collector.last_stats();
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics << u << "," << st.mean_return << "," << st.mean_distance << "," << st.mean_served
            << "," << st.mean_vehicles << "," << report.policy_loss << "," << report.value_loss
            << "," << report.entropy << "," << report.clip_fraction << "," << report.approx_kl
            << "," << wall << "\n";

    if (u % config.eval_every == 0 || u == config.global_updates) {
      const EvalStats ev = evaluate_policy(policy, config);
      evals << u << "," << ev.mean_objective << "," << ev.mean_distance << "," << ev.mean_served
            << "\n";
      std::cout << "eval @" << u << ": objective " << ev.mean_objective << " (return "
                << st.mean_return << ", dist " << st.mean_distance << ")" << std::endl;
      result.final_eval_objective = ev.mean_objective;
      save_checkpoint(policy, config, u, out_dir / ("ckpt_u" + std::to_string(u) + ".bin"));
    }
    result.updates_completed = u;
  }

  save_checkpoint(policy, config, config.global_updates, result.checkpoint_path);
  atomic_write_text(result.metrics_path, metrics.str());
  atomic_write_text(result.eval_path, evals.str());
  return result;
}

}  // namespace asap
