#include "asap/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#include "asap/errors.hpp"

namespace asap {

namespace {
constexpr double kBnEps = 1e-5;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}  // namespace

void PolicyConfig::validate() const {
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " must be divisible by heads " + std::to_string(heads));
  if (ff_dim < embed_dim)
    throw ConfigError("ff_dim " + std::to_string(ff_dim) + " must be >= embed_dim " +
                      std::to_string(embed_dim));
  if (encoder_layers < 1) throw ConfigError("encoder_layers must be >= 1");
  if (clip_c <= 0.0) throw ConfigError("clip_c must be positive");
  if (context_extra != 2) throw ConfigError("context_extra must be 2 (load, vehicles)");
}

PolicyParams make_policy(const PolicyConfig& config, uint64_t seed) {
  config.validate();
  const int64_t d = config.embed_dim;
  const int64_t ff = config.ff_dim;
  Rng rng(seed);
  PolicyParams p;
  p.config = config;

  auto w = [&](const std::string& name, Shape shape, int64_t fan_in) {
    p.params.add(name, init_weight(std::move(shape), fan_in, rng));
  };
  auto bn = [&](const std::string& prefix) {
    Tensor gamma = Tensor::zeros({d}, true);
    std::fill(gamma.values().begin(), gamma.values().end(), 1.0);
    p.params.add(prefix + ".gamma", gamma);
    p.params.add(prefix + ".beta", Tensor::zeros({d}, true));
    Tensor rv = Tensor::zeros({d});
    std::fill(rv.values().begin(), rv.values().end(), 1.0);
    p.buffers.add(prefix + ".run_mean", Tensor::zeros({d}));
    p.buffers.add(prefix + ".run_var", rv);
  };

  w("embed.depot.W", {2, d}, 2);
  w("embed.depot.b", {d}, 2);
  w("embed.cust.W", {3, d}, 3);
  w("embed.cust.b", {d}, 3);
  for (int l = 0; l < config.encoder_layers; ++l) {
    const std::string e = "enc" + std::to_string(l);
    w(e + ".attn.Wq", {d, d}, d);
    w(e + ".attn.Wk", {d, d}, d);
    w(e + ".attn.Wv", {d, d}, d);
    w(e + ".attn.Wo", {d, d}, d);
    bn(e + ".bn1");
    w(e + ".ff.Wi", {d, ff}, d);
    w(e + ".ff.bi", {ff}, d);
    w(e + ".ff.Wj", {ff, d}, ff);
    w(e + ".ff.bj", {d}, ff);
    bn(e + ".bn2");
  }
  w("ctx.Wh", {d, d}, d);
  w("glimpse.Wg", {d, 3 * d}, d);
  w("ctx.Wo", {d + 2, d}, d + 2);
  w("dec.Wo", {d, d}, d);
  w("critic.W1", {d, 128}, d);
  w("critic.b1", {128}, d);
  w("critic.W2", {128, 1}, 128);
  w("critic.b2", {1}, 128);

  p.params.check_trainable();
  return p;
}

void apply_bn_capture(PolicyParams& policy, const BnCapture& capture, double momentum) {
  size_t idx = 0;
  for (int l = 0; l < policy.config.encoder_layers; ++l) {
    for (const char* tag : {".bn1", ".bn2"}) {
      if (idx >= capture.means.size()) throw ContractError("bn capture too short");
      const std::string prefix = "enc" + std::to_string(l) + tag;
      Tensor mean = policy.buffers.at(prefix + ".run_mean");
      Tensor var = policy.buffers.at(prefix + ".run_var");
      for (size_t j = 0; j < mean.values().size(); ++j) {
        mean.values()[j] =
            (1.0 - momentum) * mean.values()[j] + momentum * capture.means[idx][j];
        var.values()[j] = (1.0 - momentum) * var.values()[j] + momentum * capture.vars[idx][j];
      }
      ++idx;
    }
  }
}

Tensor embed_nodes(Tape& tape, const PolicyParams& policy, const Instance& instance) {
  const int n = instance.num_nodes();
  Tensor depot_in = Tensor::from({1, 2}, {instance.xs[0], instance.ys[0]});
  std::vector<double> cust;
  cust.reserve(static_cast<size_t>(n - 1) * 3);
  for (int i = 1; i < n; ++i) {
    cust.push_back(instance.xs[i]);
    cust.push_back(instance.ys[i]);
    cust.push_back(instance.demand[i]);
  }
  Tensor cust_in = Tensor::from({n - 1, 3}, std::move(cust));
  Tensor depot_emb =
      tape.linear(depot_in, policy.params.at("embed.depot.W"), policy.params.at("embed.depot.b"));
  Tensor cust_emb =
      tape.linear(cust_in, policy.params.at("embed.cust.W"), policy.params.at("embed.cust.b"));
  return tape.concat_rows({depot_emb, cust_emb});
}

namespace {

Tensor encoder_bn(Tape& tape, const PolicyParams& policy, const std::string& prefix,
                  const Tensor& x, BnMode mode, BnCapture* capture) {
  const Tensor& gamma = policy.params.at(prefix + ".gamma");
  const Tensor& beta = policy.params.at(prefix + ".beta");
  if (mode == BnMode::Eval) {
    return tape.batch_norm_eval(x, gamma, beta, policy.buffers.at(prefix + ".run_mean"),
                                policy.buffers.at(prefix + ".run_var"), kBnEps);
  }
  std::vector<double> mean, var;
  Tensor out = tape.batch_norm_train(x, gamma, beta, kBnEps, capture ? &mean : nullptr,
                                     capture ? &var : nullptr);
  if (capture) {
    capture->means.push_back(std::move(mean));
    capture->vars.push_back(std::move(var));
  }
  return out;
}

}  // namespace

EncodedGraph encode(Tape& tape, const PolicyParams& policy, const Instance& instance,
                    BnMode mode, BnCapture* capture) {
  const PolicyConfig& cfg = policy.config;
  const int64_t d = cfg.embed_dim;

  EncodedGraph enc;
  enc.static_emb = embed_nodes(tape, policy, instance);
  Tensor x = enc.static_emb;
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string e = "enc" + std::to_string(l);
    Tensor q = tape.matmul(x, policy.params.at(e + ".attn.Wq"));
    Tensor k = tape.matmul(x, policy.params.at(e + ".attn.Wk"));
    Tensor v = tape.matmul(x, policy.params.at(e + ".attn.Wv"));
    Tensor attn =
        multi_head_attention(tape, q, k, v, cfg.heads, {}, policy.params.at(e + ".attn.Wo"));
    Tensor h1 = encoder_bn(tape, policy, e + ".bn1", cfg.residual ? tape.add(x, attn) : attn,
                           mode, capture);
    Tensor ff = tape.linear(
        tape.relu(tape.linear(h1, policy.params.at(e + ".ff.Wi"), policy.params.at(e + ".ff.bi"))),
        policy.params.at(e + ".ff.Wj"), policy.params.at(e + ".ff.bj"));
    x = encoder_bn(tape, policy, e + ".bn2", cfg.residual ? tape.add(h1, ff) : ff, mode,
                   capture);
  }
  enc.h_enc = x;
  enc.c_h = tape.matmul(tape.mean_rows(x), policy.params.at("ctx.Wh"));
  Tensor g = tape.matmul(x, policy.params.at("glimpse.Wg"));
  enc.g_k = tape.slice_cols(g, 0, d);
  enc.g_v = tape.slice_cols(g, d, d);
  enc.k_l = tape.slice_cols(g, 2 * d, d);
  return enc;
}

void StateBatch::append(const EnvState& state) {
  const int n = state.nodes();
  if (steps == 0) {
    traj = state.num_traj;
    nodes = n;
  } else if (traj != state.num_traj || nodes != n) {
    throw ShapeError("StateBatch: mixed trajectory counts or node counts");
  }
  const auto feasible = feasible_actions(state);
  const auto urgency = compute_urgency(state);
  for (int t = 0; t < state.num_traj; ++t) {
    current.push_back(state.current_node[t]);
    load.push_back(state.load[t]);
    vehicles.push_back(static_cast<double>(state.vehicles_remaining[t]));
    for (int node = 0; node < n; ++node) {
      const size_t i = static_cast<size_t>(t) * n + node;
      // Frozen trajectories keep a depot-only dummy row so the batch stays
      // rectangular; their draws are ignored and excluded from training.
      const bool selectable = state.done[t] ? (node == 0) : feasible[i] != 0;
      infeasible.push_back(selectable ? 0 : 1);
      double add = 0.0;
      if (selectable && !urgency.missed[i]) add = std::clamp(urgency.value[i], 0.0, 1.0);
      urgency_add.push_back(add);
    }
  }
  steps += 1;
}

DecodeOut decode_step(Tape& tape, const PolicyParams& policy, const EncodedGraph& enc,
                      const StateBatch& batch) {
  const PolicyConfig& cfg = policy.config;
  const int64_t d = cfg.embed_dim;
  if (enc.static_emb.dim(0) != batch.nodes)
    throw ShapeError("decode_step: encoding is for " + std::to_string(enc.static_emb.dim(0)) +
                     " nodes, state batch has " + std::to_string(batch.nodes));
  const int64_t p = static_cast<int64_t>(batch.rows());

  Tensor cur_emb = tape.gather_rows(enc.static_emb, batch.current);
  std::vector<double> extra(static_cast<size_t>(p) * 2);
  for (int64_t r = 0; r < p; ++r) {
    extra[r * 2 + 0] = batch.load[r];
    extra[r * 2 + 1] = batch.vehicles[r];
  }
  Tensor extras = Tensor::from({p, 2}, std::move(extra));
  Tensor c_o = tape.matmul(tape.concat_cols({cur_emb, extras}), policy.params.at("ctx.Wo"));
  Tensor q_m = tape.add_rowvec(c_o, enc.c_h);

  Tensor g_q = multi_head_attention(tape, q_m, enc.g_k, enc.g_v, cfg.heads, batch.infeasible,
                                    policy.params.at("dec.Wo"));

  Tensor scores = tape.scale(tape.matmul_nt(g_q, enc.k_l), 1.0 / std::sqrt(double(d)));
  Tensor u = tape.scale(tape.add_const(tape.tanh_(scores), batch.urgency_add), cfg.clip_c);
  DecodeOut out;
  out.logits = tape.mask_fill_neg_inf(u, batch.infeasible);
  out.glimpse = g_q;
  return out;
}

Tensor critic_value(Tape& tape, const PolicyParams& policy, const Tensor& glimpse) {
  Tensor h = tape.relu(
      tape.linear(glimpse, policy.params.at("critic.W1"), policy.params.at("critic.b1")));
  Tensor v = tape.linear(h, policy.params.at("critic.W2"), policy.params.at("critic.b2"));
  return tape.reshape_copy(v, {v.rows()});
}

std::vector<CategoricalDraw> act(const Tensor& logits, ActMode mode, Rng& rng) {
  const int64_t p = logits.rows(), n = logits.cols();
  std::vector<CategoricalDraw> draws;
  draws.reserve(p);
  for (int64_t r = 0; r < p; ++r) {
    std::span<const double> row(logits.data() + r * n, static_cast<size_t>(n));
    draws.push_back(mode == ActMode::Greedy ? categorical_argmax(row)
                                            : categorical_sample(row, rng));
  }
  return draws;
}

std::vector<double> EpisodeRecord::episode_returns() const {
  std::vector<double> ret(traj, 0.0);
  for (const auto& step_rewards : rewards)
    for (int t = 0; t < traj; ++t) ret[t] += step_rewards[t];
  return ret;
}

EpisodeRecord rollout_episode(const Instance& instance, const PolicyParams& policy,
                              ActMode mode, Rng& rng, const RolloutOptions& options) {
  const int customers = instance.num_customers();
  auto inst = std::make_shared<const Instance>(instance);
  EnvState state = reset(inst, customers, options.penalty);
  const int cap = options.step_cap > 0
                      ? options.step_cap
                      : 4 * (instance.num_nodes() + instance.fleet_size);

  Tape tape(/*grad_enabled=*/false);
  EncodedGraph enc = encode(tape, policy, instance, options.bn_mode, options.bn_capture);

  EpisodeRecord rec;
  rec.traj = customers;
  rec.encode_count = 1;

  for (int step_idx = 0; step_idx < cap && !state.all_done(); ++step_idx) {
    StateBatch batch;
    batch.append(state);
    DecodeOut dec = decode_step(tape, policy, enc, batch);
    Tensor values = critic_value(tape, policy, dec.glimpse);

    std::vector<uint8_t> live_before(customers);
    for (int t = 0; t < customers; ++t) live_before[t] = state.done[t] ? 0 : 1;

    std::vector<int> actions(customers);
    std::vector<double> logp(customers), ent(customers);
    if (step_idx == 0) {
      const auto forced = force_pomo_starts(state);
      for (int t = 0; t < customers; ++t) {
        actions[t] = forced[t];
        const int64_t n = dec.logits.cols();
        std::span<const double> row(dec.logits.data() + t * n, static_cast<size_t>(n));
        // Log-probability of the forced action under the current policy;
        // recorded for completeness, excluded from any loss.
        double m = kNegInf;
        for (double x : row) m = std::max(m, x);
        double s = 0.0;
        for (double x : row)
          if (x != kNegInf) s += std::exp(x - m);
        logp[t] = row[actions[t]] - (m + std::log(s));
        ent[t] = 0.0;
      }
    } else {
      const auto draws = act(dec.logits, mode, rng);
      for (int t = 0; t < customers; ++t) {
        actions[t] = static_cast<int>(draws[t].index);
        logp[t] = draws[t].log_prob;
        ent[t] = draws[t].entropy;
      }
    }

    const StepOutcome outcome = step(state, actions);

    rec.actions.push_back(actions);
    rec.log_probs.push_back(logp);
    rec.entropies.push_back(ent);
    std::vector<double> vals(customers);
    for (int t = 0; t < customers; ++t) vals[t] = values.data()[t];
    rec.values.push_back(std::move(vals));
    rec.rewards.push_back(outcome.reward);
    rec.dones.push_back(outcome.done);
    std::vector<uint8_t> inc(customers);
    for (int t = 0; t < customers; ++t)
      inc[t] = (step_idx > 0 && live_before[t]) ? 1 : 0;
    rec.included.push_back(std::move(inc));
    if (options.record_trace) {
      rec.logits_trace.emplace_back(dec.logits.data(),
                                    dec.logits.data() + dec.logits.numel());
    }
  }
  rec.final_state = std::move(state);
  return rec;
}

}  // namespace asap
