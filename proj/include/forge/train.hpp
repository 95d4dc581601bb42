#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "head.hpp"
#include "task.hpp"

namespace forge {

struct DatasetSample {
  TaskSpec task;
  WorldState world;
  Trajectory actions;
  StageAnnotation ann;
};

struct Dataset {
  uint32_t version = 1;
  int length = 64;      // L
  int action_dim = kDefaultActionDim;
  uint64_t seed = 0;
  std::vector<DatasetSample> samples;
};

struct TrainConfig {
  int steps = 2000;
  int batch = 8;
  int warmup = 500;
  double lr = 3e-4;
  double weight_decay = 0.05;
  double clip_norm = 1.0;
  double ema_decay = 0.999;
  bool adam = false;      // adaptive moments are opt-in; plain descent by default
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool cosine_lr = true;
  int t_lo = 400;
  int t_hi = 900;
  LossWeights loss;
  int schedule_steps = 1000;
  int log_every = 0;  // 0 = silent

  void validate() const {
    if (steps < 1 || batch < 1 || warmup < 0 || lr <= 0 || weight_decay < 0 || clip_norm <= 0 ||
        ema_decay < 0 || ema_decay >= 1.0 || t_lo < 1 || t_hi < t_lo || schedule_steps < t_hi)
      throw_invalid("TrainConfig: invalid field");
  }
};

namespace detail {

inline double grad_norm(const HeadParams& g) {
  double s = 0.0;
  for (auto* t : tensor_list(g))
    for (double v : *t) s += v * v;
  return std::sqrt(s);
}

}  // namespace detail

/// Optimizer state kept alongside the parameters so training can resume
/// mid-run bit-exactly.
struct TrainState {
  HeadParams params;
  HeadParams ema;
  HeadParams m;  // first moment (adam only)
  HeadParams v;  // second moment (adam only)
  int step = 0;
};

struct TrainLogEntry {
  int step;
  double loss;
  double lr;
};

inline double lr_at(const TrainConfig& c, int step) {
  double lr = c.lr;
  if (c.warmup > 0 && step < c.warmup) lr *= static_cast<double>(step + 1) / c.warmup;
  if (c.cosine_lr) {
    const int total = std::max(1, c.steps - c.warmup);
    const int done = std::max(0, step - c.warmup);
    const double progress = std::min(1.0, static_cast<double>(done) / total);
    lr *= 0.5 * (1.0 + std::cos(M_PI * progress));
  }
  return lr;
}

/// One optimizer step on a prepared batch (exposed for probes and resume).
inline void train_step(TrainState& st, const TrainBatch& batch, const TrainConfig& cfg,
                       const NoiseSchedule& sched, double* loss_out = nullptr) {
  double loss = 0.0;
  HeadParams grad = loss_gradient(st.params, batch, cfg.loss, sched, &loss);
  if (loss_out) *loss_out = loss;

  const double gn = detail::grad_norm(grad);
  if (gn > cfg.clip_norm) {
    const double sc = cfg.clip_norm / gn;
    for (auto* t : tensor_list(grad))
      for (double& v : *t) v *= sc;
  }

  const double lr = lr_at(cfg, st.step);
  auto p_t = tensor_list(st.params);
  auto g_t = tensor_list(grad);
  if (cfg.adam) {
    auto m_t = tensor_list(st.m);
    auto v_t = tensor_list(st.v);
    const double bc1 = 1.0 - std::pow(cfg.beta1, st.step + 1);
    const double bc2 = 1.0 - std::pow(cfg.beta2, st.step + 1);
    for (size_t k = 0; k < p_t.size(); ++k) {
      auto& p = *p_t[k];
      auto& g = *g_t[k];
      auto& m = *m_t[k];
      auto& v = *v_t[k];
      for (size_t j = 0; j < p.size(); ++j) {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        const double mh = m[j] / bc1;
        const double vh = v[j] / bc2;
        p[j] -= lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * p[j]);
      }
    }
  } else {
    for (size_t k = 0; k < p_t.size(); ++k) {
      auto& p = *p_t[k];
      auto& g = *g_t[k];
      for (size_t j = 0; j < p.size(); ++j) p[j] -= lr * (g[j] + cfg.weight_decay * p[j]);
    }
  }

  // Exponential parameter average; decay 0 tracks the raw parameters.
  auto e_t = tensor_list(st.ema);
  for (size_t k = 0; k < p_t.size(); ++k) {
    auto& e = *e_t[k];
    auto& p = *p_t[k];
    for (size_t j = 0; j < p.size(); ++j)
      e[j] = cfg.ema_decay * e[j] + (1.0 - cfg.ema_decay) * p[j];
  }
  ++st.step;
}

inline TrainBatch make_batch(const Dataset& data, const std::vector<std::vector<double>>& contexts,
                             const TrainConfig& cfg, Rng& rng) {
  TrainBatch batch;
  batch.reserve(cfg.batch);
  for (int k = 0; k < cfg.batch; ++k) {
    const int idx = rng.uniform_int(0, static_cast<int>(data.samples.size()) - 1);
    const DatasetSample& ds = data.samples[idx];
    TrainSample ts;
    ts.x0 = ds.actions;
    ts.ann = ds.ann;
    ts.context = contexts[idx];
    ts.t = assign_stage_timesteps(ds.ann, rng, cfg.t_lo, cfg.t_hi);
    ts.eps = Trajectory::gaussian(ds.actions.length, ds.actions.dim, rng);
    batch.push_back(std::move(ts));
  }
  return batch;
}

/**
 * Minibatch training with decoupled weight decay, warmup + cosine decay,
 * gradient-norm clipping and exponential parameter averaging. Returns the
 * averaged parameters. Fully reproducible from the seed.
 */
inline HeadParams train(const HeadConfig& head_cfg, const TrainConfig& cfg, const Dataset& data,
                        uint64_t seed, std::vector<TrainLogEntry>* log = nullptr,
                        TrainState* state_out = nullptr, const TrainState* resume = nullptr) {
  cfg.validate();
  if (data.samples.empty()) throw_invalid("train: empty dataset");
  const NoiseSchedule sched = build_cosine_schedule(cfg.schedule_steps);

  std::vector<std::vector<double>> contexts;
  contexts.reserve(data.samples.size());
  for (const auto& s : data.samples)
    contexts.push_back(encode_context(s.task, s.world, head_cfg.context_dim));

  TrainState st;
  Rng rng(derive_seed(seed, {0x7261696e}));
  if (resume) {
    st = *resume;
    // The batch stream is a pure function of (seed, step); fast-forward the
    // stream instead of serializing engine state.
    for (int k = 0; k < st.step; ++k) make_batch(data, contexts, cfg, rng);
  } else {
    Rng init_rng(derive_seed(seed, {0x696e6974}));
    st.params = HeadParams::init(head_cfg, init_rng);
    st.ema = st.params;
    st.m = HeadParams::zeros(head_cfg);
    st.v = HeadParams::zeros(head_cfg);
    st.step = 0;
  }

  for (int s = st.step; s < cfg.steps; ++s) {
    TrainBatch batch = make_batch(data, contexts, cfg, rng);
    double loss = 0.0;
    train_step(st, batch, cfg, sched, &loss);
    if (log && cfg.log_every > 0 && (s % cfg.log_every == 0 || s + 1 == cfg.steps))
      log->push_back({s, loss, lr_at(cfg, s)});
    if (cfg.log_every > 0 && (s % cfg.log_every == 0 || s + 1 == cfg.steps))
      std::fprintf(stderr, "step %6d  loss %.6f  lr %.2e\n", s, loss, lr_at(cfg, s));
  }
  if (state_out) *state_out = st;
  return st.ema;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: magic, config header, then the flat little-endian
// 64-bit float payload in declaration order.
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[8] = {'F', 'O', 'R', 'G', 'E', 'H', 'D', '1'};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw_invalid("checkpoint: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  }
  double f64() {
    const uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace detail

inline std::string serialize_params(const HeadParams& p, uint64_t seed) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  const HeadConfig& c = p.cfg;
  detail::put_u32(out, static_cast<uint32_t>(c.action_dim));
  detail::put_u32(out, static_cast<uint32_t>(c.context_dim));
  detail::put_u32(out, static_cast<uint32_t>(c.window));
  detail::put_u32(out, static_cast<uint32_t>(c.hidden));
  detail::put_u32(out, static_cast<uint32_t>(c.layers));
  detail::put_u32(out, static_cast<uint32_t>(c.time_dim));
  detail::put_u32(out, static_cast<uint32_t>(c.stage_dim));
  detail::put_u32(out, static_cast<uint32_t>(c.stage_slots));
  detail::put_u32(out, static_cast<uint32_t>(c.phase_dim));
  detail::put_u32(out, static_cast<uint32_t>(c.schedule_steps));
  detail::put_u32(out, c.clean_value_output ? 1 : 0);
  detail::put_u32(out, static_cast<uint32_t>(c.time_floor));
  detail::put_u64(out, seed);
  detail::put_u64(out, param_count(p));
  for (auto* t : tensor_list(p))
    for (double v : *t) detail::put_f64(out, v);
  return out;
}

inline HeadParams deserialize_params(const std::string& buf, uint64_t* seed_out = nullptr) {
  if (buf.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw_invalid("checkpoint: bad magic");
  detail::Reader r(buf);
  r.pos = sizeof(kCheckpointMagic);
  HeadConfig c;
  c.action_dim = static_cast<int>(r.u32());
  c.context_dim = static_cast<int>(r.u32());
  c.window = static_cast<int>(r.u32());
  c.hidden = static_cast<int>(r.u32());
  c.layers = static_cast<int>(r.u32());
  c.time_dim = static_cast<int>(r.u32());
  c.stage_dim = static_cast<int>(r.u32());
  c.stage_slots = static_cast<int>(r.u32());
  c.phase_dim = static_cast<int>(r.u32());
  c.schedule_steps = static_cast<int>(r.u32());
  c.clean_value_output = r.u32() != 0;
  c.time_floor = static_cast<int>(r.u32());
  const uint64_t seed = r.u64();
  if (seed_out) *seed_out = seed;
  const uint64_t n = r.u64();
  HeadParams p = HeadParams::zeros(c);
  if (n != param_count(p)) throw_invalid("checkpoint: parameter count mismatch");
  for (auto* t : tensor_list(p))
    for (double& v : *t) v = r.f64();
  return p;
}

inline void save_checkpoint(const std::string& path, const HeadParams& p, uint64_t seed) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  const std::string buf = serialize_params(p, seed);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline HeadParams load_checkpoint(const std::string& path, uint64_t* seed_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize_params(ss.str(), seed_out);
}

// Training-state sidecar (raw + averaged params, moments, step) so a run can
// resume and reproduce the uninterrupted trajectory.
constexpr char kStateMagic[8] = {'F', 'O', 'R', 'G', 'E', 'S', 'T', '1'};

inline void save_train_state(const std::string& path, const TrainState& st, uint64_t seed) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write train state: " + path);
  std::string out(kStateMagic, sizeof(kStateMagic));
  detail::put_u32(out, static_cast<uint32_t>(st.step));
  for (const std::string& part :
       {serialize_params(st.params, seed), serialize_params(st.ema, seed),
        serialize_params(st.m, seed), serialize_params(st.v, seed)}) {
    detail::put_u64(out, part.size());
    out += part;
  }
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline TrainState load_train_state(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read train state: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < sizeof(kStateMagic) ||
      std::memcmp(buf.data(), kStateMagic, sizeof(kStateMagic)) != 0)
    throw_invalid("train state: bad magic");
  detail::Reader r(buf);
  r.pos = sizeof(kStateMagic);
  TrainState st;
  st.step = static_cast<int>(r.u32());
  auto next_part = [&]() {
    const uint64_t n = r.u64();
    r.need(n);
    const std::string part = buf.substr(r.pos, n);
    r.pos += n;
    return deserialize_params(part);
  };
  st.params = next_part();
  st.ema = next_part();
  st.m = next_part();
  st.v = next_part();
  return st;
}

}  // namespace forge
