#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "rng.hpp"
#include "schedule.hpp"
#include "scene_graph.hpp"
#include "task.hpp"
#include "trajectory.hpp"
#include "world.hpp"

namespace forge {

/**
 * Noise-prediction head: a per-token MLP over a symmetric window of tokens,
 * modulated per layer by FiLM scale/shift/gate vectors generated from the
 * context embedding, a sinusoidal timestep embedding and a learned stage
 * embedding. Every token shares the same parameters, so the output at a
 * token depends only on its local window, the conditioning vector and its
 * own timestep.
 */
struct HeadConfig {
  int action_dim = kDefaultActionDim;
  int context_dim = 32;   // d_c
  int window = 4;         // tokens visible each side
  int hidden = 64;
  int layers = 2;         // hidden layers; 0 = linear head
  int time_dim = 32;      // sinusoidal embedding width (even)
  int stage_dim = 8;      // learned stage embedding width
  int stage_slots = 16;   // stage embedding rows
  int phase_dim = 4;      // within-stage progress features (0 disables)
  int schedule_steps = 1000;  // diffusion horizon the head is bound to
  // Training assigns either t = 0 or a per-stage level inside [t_lo, t_hi];
  // sampling grids pass through levels below that band. Nonzero timesteps
  // below the floor share the floor's embedding (the noise algebra still
  // uses the true level), so the denoiser never extrapolates its
  // conditioning.
  int time_floor = 400;
  // The network emits a clean-value estimate; the noise prediction is
  // derived from it through the schedule. This keeps the geometric losses
  // acting on the output directly instead of through the 1/sqrt(ab)
  // amplification. Disabled for linear probes.
  bool clean_value_output = true;

  int input_dim() const { return (2 * window + 1) * action_dim + phase_dim; }
  int film_dim() const { return context_dim + time_dim + stage_dim; }
  int layer_in(int l) const { return l == 0 ? input_dim() : hidden; }
  int out_in() const { return layers == 0 ? input_dim() : hidden; }

  bool operator==(const HeadConfig&) const = default;

  void validate() const {
    if (action_dim < 4 || context_dim < 1 || window < 0 || hidden < 1 || layers < 0 ||
        time_dim < 2 || time_dim % 2 != 0 || stage_dim < 0 || stage_slots < 1 || phase_dim < 0 ||
        (phase_dim != 0 && phase_dim != 4) || schedule_steps < 1 || time_floor < 0 ||
        time_floor > schedule_steps)
      throw_invalid("HeadConfig: invalid dimensions");
  }
};

/**
 * Per-token stage conditioning derived from an annotation: the stage ordinal
 * (through the learned embedding table) and the within-stage progress
 * (appended to the token input features). Without an annotation both are
 * neutral, so the prediction depends only on the window, context and
 * timestep.
 */
struct StageContext {
  std::vector<int> ordinal;
  std::vector<double> phase;  // progress through the stage, (0, 1]

  static StageContext neutral(int L) {
    StageContext sc;
    sc.ordinal.assign(L, 0);
    sc.phase.assign(L, 0.5);
    return sc;
  }

  static StageContext from(const StageAnnotation& ann) {
    StageContext sc;
    const int L = ann.length();
    sc.ordinal.assign(L, 0);
    sc.phase.assign(L, 0.5);
    const auto runs = ann.runs();
    for (size_t r = 0; r < runs.size(); ++r) {
      const auto [s, e] = runs[r];
      const int n = e - s + 1;
      for (int i = s; i <= e; ++i) {
        sc.ordinal[i] = static_cast<int>(r);
        sc.phase[i] = static_cast<double>(i - s + 1) / n;
      }
    }
    return sc;
  }
};

struct HeadParams {
  HeadConfig cfg;
  NoiseSchedule sched;                      // derived from cfg, not learned
  std::vector<std::vector<double>> w;       // [layers] hidden x layer_in
  std::vector<std::vector<double>> b;       // [layers] hidden
  std::vector<std::vector<double>> film_w;  // [layers] (3*hidden) x film_dim
  std::vector<std::vector<double>> film_b;  // [layers] 3*hidden
  std::vector<double> stage_table;          // stage_slots x stage_dim
  std::vector<double> out_w;                // action_dim x out_in
  std::vector<double> out_b;                // action_dim

  static HeadParams zeros(const HeadConfig& cfg) {
    cfg.validate();
    HeadParams p;
    p.cfg = cfg;
    p.sched = build_cosine_schedule(cfg.schedule_steps);
    p.w.resize(cfg.layers);
    p.b.resize(cfg.layers);
    p.film_w.resize(cfg.layers);
    p.film_b.resize(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
      p.w[l].assign(static_cast<size_t>(cfg.hidden) * cfg.layer_in(l), 0.0);
      p.b[l].assign(cfg.hidden, 0.0);
      p.film_w[l].assign(static_cast<size_t>(3 * cfg.hidden) * cfg.film_dim(), 0.0);
      p.film_b[l].assign(3 * cfg.hidden, 0.0);
    }
    p.stage_table.assign(static_cast<size_t>(cfg.stage_slots) * cfg.stage_dim, 0.0);
    p.out_w.assign(static_cast<size_t>(cfg.action_dim) * cfg.out_in(), 0.0);
    p.out_b.assign(cfg.action_dim, 0.0);
    return p;
  }

  static HeadParams init(const HeadConfig& cfg, Rng& rng) {
    HeadParams p = zeros(cfg);
    auto fill = [&](std::vector<double>& v, double scale) {
      for (double& x : v) x = scale * (2.0 * rng.uniform() - 1.0);
    };
    for (int l = 0; l < cfg.layers; ++l) {
      fill(p.w[l], 1.0 / std::sqrt(static_cast<double>(cfg.layer_in(l))));
      fill(p.film_w[l], 0.1 / std::sqrt(static_cast<double>(cfg.film_dim())));
    }
    fill(p.stage_table, 0.1);
    fill(p.out_w, 1.0 / std::sqrt(static_cast<double>(cfg.out_in())));
    return p;
  }
};

/// Tensors in declaration order; used by the optimizer, serialization and
/// finite-difference checks.
inline std::vector<std::vector<double>*> tensor_list(HeadParams& p) {
  std::vector<std::vector<double>*> out;
  for (int l = 0; l < p.cfg.layers; ++l) {
    out.push_back(&p.w[l]);
    out.push_back(&p.b[l]);
    out.push_back(&p.film_w[l]);
    out.push_back(&p.film_b[l]);
  }
  out.push_back(&p.stage_table);
  out.push_back(&p.out_w);
  out.push_back(&p.out_b);
  return out;
}

inline std::vector<const std::vector<double>*> tensor_list(const HeadParams& p) {
  std::vector<const std::vector<double>*> out;
  for (auto* t : tensor_list(const_cast<HeadParams&>(p))) out.push_back(t);
  return out;
}

inline size_t param_count(const HeadParams& p) {
  size_t n = 0;
  for (auto* t : tensor_list(p)) n += t->size();
  return n;
}

inline void time_embedding(int t, int dim, double* out) {
  const int half = dim / 2;
  for (int j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * j / half);
    out[2 * j] = std::sin(t * freq);
    out[2 * j + 1] = std::cos(t * freq);
  }
}

namespace detail {

/// FiLM activations for one (timestep, stage-ordinal) pair, all layers.
struct FilmCombo {
  int t = 0;
  int ord = 0;
  std::vector<double> z;  // film input
  std::vector<std::vector<double>> scale, shift, gate, gate_pre;
};

struct FilmCache {
  const HeadParams& p;
  const std::vector<double>& context;
  std::vector<FilmCombo> combos;

  FilmCache(const HeadParams& params, const std::vector<double>& c) : p(params), context(c) {}

  int lookup(int t, int ord) {
    for (size_t i = 0; i < combos.size(); ++i)
      if (combos[i].t == t && combos[i].ord == ord) return static_cast<int>(i);
    const HeadConfig& cfg = p.cfg;
    FilmCombo fc;
    fc.t = t;
    fc.ord = ord;
    fc.z.assign(cfg.film_dim(), 0.0);
    std::memcpy(fc.z.data(), context.data(), sizeof(double) * cfg.context_dim);
    time_embedding(t, cfg.time_dim, fc.z.data() + cfg.context_dim);
    const int row = std::min(ord, cfg.stage_slots - 1);
    std::memcpy(fc.z.data() + cfg.context_dim + cfg.time_dim,
                p.stage_table.data() + static_cast<size_t>(row) * cfg.stage_dim,
                sizeof(double) * cfg.stage_dim);
    fc.scale.resize(cfg.layers);
    fc.shift.resize(cfg.layers);
    fc.gate.resize(cfg.layers);
    fc.gate_pre.resize(cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
      const int H = cfg.hidden;
      const int F = cfg.film_dim();
      std::vector<double> raw(3 * H, 0.0);
      const double* fw = p.film_w[l].data();
      for (int k = 0; k < 3 * H; ++k) {
        double s = p.film_b[l][k];
        const double* wr = fw + static_cast<size_t>(k) * F;
        for (int j = 0; j < F; ++j) s += wr[j] * fc.z[j];
        raw[k] = s;
      }
      fc.scale[l].assign(raw.begin(), raw.begin() + H);
      fc.shift[l].assign(raw.begin() + H, raw.begin() + 2 * H);
      fc.gate_pre[l].assign(raw.begin() + 2 * H, raw.end());
      fc.gate[l].resize(H);
      for (int h = 0; h < H; ++h) fc.gate[l][h] = sigmoid(fc.gate_pre[l][h]);
    }
    combos.push_back(std::move(fc));
    return static_cast<int>(combos.size()) - 1;
  }
};

/// Per-token forward intermediates retained for backprop.
struct TokenTape {
  int combo = 0;
  int t = 0;
  std::vector<double> input;                 // window features
  std::vector<std::vector<double>> pre;      // [layers] hidden
  std::vector<std::vector<double>> tanh_a;   // [layers] hidden
  std::vector<std::vector<double>> h;        // [layers] hidden (post gate)
};

inline void gather_window(const Trajectory& x, int token, int window, double* out) {
  const int d = x.dim;
  int k = 0;
  for (int off = -window; off <= window; ++off) {
    const int j = token + off;
    if (j < 0 || j >= x.length) {
      for (int c = 0; c < d; ++c) out[k++] = 0.0;
    } else {
      const double* r = x.row(j);
      for (int c = 0; c < d; ++c) out[k++] = r[c];
    }
  }
}

inline void forward_token(const HeadParams& p, FilmCache& cache, const Trajectory& x_t, int token,
                          int t, int ord, double phase, double* eps_out, TokenTape* tape) {
  const HeadConfig& cfg = p.cfg;
  const int t_cond = t == 0 ? 0 : std::max(t, cfg.time_floor);
  const int combo = cache.lookup(t_cond, ord);
  const FilmCombo& fc = cache.combos[combo];

  std::vector<double> input(cfg.input_dim());
  gather_window(x_t, token, cfg.window, input.data());
  if (cfg.phase_dim == 4) {
    double* ph = input.data() + (2 * cfg.window + 1) * cfg.action_dim;
    ph[0] = phase;
    ph[1] = 1.0 - phase;
    ph[2] = std::sin(M_PI * phase);
    ph[3] = std::cos(M_PI * phase);
  }

  if (tape) {
    tape->combo = combo;
    tape->t = t;
    tape->input = input;
    tape->pre.resize(cfg.layers);
    tape->tanh_a.resize(cfg.layers);
    tape->h.resize(cfg.layers);
  }

  std::vector<double> h = input;
  for (int l = 0; l < cfg.layers; ++l) {
    const int in = cfg.layer_in(l);
    const int H = cfg.hidden;
    std::vector<double> pre(H), th(H), hn(H);
    const double* W = p.w[l].data();
    for (int k = 0; k < H; ++k) {
      double s = p.b[l][k];
      const double* wr = W + static_cast<size_t>(k) * in;
      for (int j = 0; j < in; ++j) s += wr[j] * h[j];
      pre[k] = s;
      const double a = (1.0 + fc.scale[l][k]) * s + fc.shift[l][k];
      th[k] = std::tanh(a);
      hn[k] = fc.gate[l][k] * th[k];
    }
    if (tape) {
      tape->pre[l] = pre;
      tape->tanh_a[l] = th;
      tape->h[l] = hn;
    }
    h = std::move(hn);
  }

  const int in = cfg.out_in();
  const double* center = input.data() + cfg.window * cfg.action_dim;
  for (int o = 0; o < cfg.action_dim; ++o) {
    double s = p.out_b[o];
    const double* wr = p.out_w.data() + static_cast<size_t>(o) * in;
    for (int j = 0; j < in; ++j) s += wr[j] * h[j];
    if (cfg.clean_value_output && t > 0) {
      // network output is a clean-value estimate; report the implied noise
      eps_out[o] = (center[o] - p.sched.sqrt_ab(t) * s) / p.sched.sqrt_one_minus_ab(t);
    } else {
      eps_out[o] = s;
    }
  }
}

/// Backprop one token's output gradient into the parameter gradient.
/// FiLM-generator gradients are deferred: per-combo accumulators collect
/// d(scale|shift|gate_pre) and are flushed once per sample.
inline void backward_token(const HeadParams& p, const FilmCache& cache, const TokenTape& tape,
                           const double* d_eps, HeadParams& grad,
                           std::vector<std::vector<std::vector<double>>>& film_acc) {
  const HeadConfig& cfg = p.cfg;
  const FilmCombo& fc = cache.combos[tape.combo];
  const int H = cfg.hidden;

  // chain through the clean-value reparameterization when active
  double out_chain = 1.0;
  if (cfg.clean_value_output && tape.t > 0)
    out_chain = -p.sched.sqrt_ab(tape.t) / p.sched.sqrt_one_minus_ab(tape.t);

  const std::vector<double>& h_last = cfg.layers == 0 ? tape.input : tape.h[cfg.layers - 1];
  const int oin = cfg.out_in();
  std::vector<double> dh(oin, 0.0);
  for (int o = 0; o < cfg.action_dim; ++o) {
    const double g = d_eps[o] * out_chain;
    if (g == 0.0) continue;
    double* gw = grad.out_w.data() + static_cast<size_t>(o) * oin;
    const double* wr = p.out_w.data() + static_cast<size_t>(o) * oin;
    for (int j = 0; j < oin; ++j) {
      gw[j] += g * h_last[j];
      dh[j] += wr[j] * g;
    }
    grad.out_b[o] += g;
  }

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const int in = cfg.layer_in(l);
    const std::vector<double>& h_in = l == 0 ? tape.input : tape.h[l - 1];
    std::vector<double> dpre(H);
    std::vector<double>& acc = film_acc[tape.combo][l];
    for (int k = 0; k < H; ++k) {
      const double th = tape.tanh_a[l][k];
      const double gate = fc.gate[l][k];
      const double dgate = dh[k] * th;
      const double da = dh[k] * gate * (1.0 - th * th);
      acc[k] += da * tape.pre[l][k];              // d scale
      acc[H + k] += da;                            // d shift
      acc[2 * H + k] += dgate * gate * (1.0 - gate);  // d gate_pre
      dpre[k] = da * (1.0 + fc.scale[l][k]);
    }
    std::vector<double> dh_in(in, 0.0);
    for (int k = 0; k < H; ++k) {
      const double g = dpre[k];
      if (g == 0.0) continue;
      double* gw = grad.w[l].data() + static_cast<size_t>(k) * in;
      const double* wr = p.w[l].data() + static_cast<size_t>(k) * in;
      for (int j = 0; j < in; ++j) {
        gw[j] += g * h_in[j];
        dh_in[j] += wr[j] * g;
      }
      grad.b[l][k] += g;
    }
    dh = std::move(dh_in);
  }
}

/// Flush per-combo FiLM accumulators into generator and stage-table grads.
inline void flush_film(const HeadParams& p, const FilmCache& cache,
                       const std::vector<std::vector<std::vector<double>>>& film_acc,
                       HeadParams& grad) {
  const HeadConfig& cfg = p.cfg;
  const int F = cfg.film_dim();
  const int H = cfg.hidden;
  for (size_t ci = 0; ci < cache.combos.size(); ++ci) {
    const FilmCombo& fc = cache.combos[ci];
    std::vector<double> dz(F, 0.0);
    for (int l = 0; l < cfg.layers; ++l) {
      const std::vector<double>& acc = film_acc[ci][l];
      bool any = false;
      for (double v : acc)
        if (v != 0.0) {
          any = true;
          break;
        }
      if (!any) continue;
      double* gw = grad.film_w[l].data();
      const double* fw = p.film_w[l].data();
      for (int k = 0; k < 3 * H; ++k) {
        const double a = acc[k];
        if (a == 0.0) continue;
        double* gr = gw + static_cast<size_t>(k) * F;
        const double* wr = fw + static_cast<size_t>(k) * F;
        for (int j = 0; j < F; ++j) {
          gr[j] += a * fc.z[j];
          dz[j] += wr[j] * a;
        }
        grad.film_b[l][k] += a;
      }
    }
    if (cfg.stage_dim > 0) {
      const int row = std::min(fc.ord, cfg.stage_slots - 1);
      double* srow = grad.stage_table.data() + static_cast<size_t>(row) * cfg.stage_dim;
      const int off = cfg.context_dim + cfg.time_dim;
      for (int j = 0; j < cfg.stage_dim; ++j) srow[j] += dz[off + j];
    }
  }
}

}  // namespace detail

/**
 * Per-token noise prediction over [first, last). Tokens outside the range
 * are left at zero in the output.
 */
inline Trajectory predict_noise_range(const Trajectory& x_t, const std::vector<double>& context,
                                      const TimestepVector& t, const HeadParams& params, int first,
                                      int last, const StageContext* sc = nullptr) {
  const HeadConfig& cfg = params.cfg;
  if (x_t.dim != cfg.action_dim) throw_invalid("predict_noise: action dim mismatch");
  if (static_cast<int>(context.size()) != cfg.context_dim)
    throw_invalid("predict_noise: context dim mismatch");
  if (static_cast<int>(t.size()) != x_t.length) throw_invalid("predict_noise: timestep length mismatch");
  detail::FilmCache cache(params, context);
  Trajectory out(x_t.length, x_t.dim);
  for (int i = std::max(0, first); i < std::min(last, x_t.length); ++i) {
    const int ord = sc ? sc->ordinal[i] : 0;
    const double phase = sc ? sc->phase[i] : 0.5;
    detail::forward_token(params, cache, x_t, i, t[i], ord, phase, out.row(i), nullptr);
  }
  return out;
}

inline Trajectory predict_noise(const Trajectory& x_t, const std::vector<double>& context,
                                const TimestepVector& t, const HeadParams& params,
                                const StageContext* sc = nullptr) {
  return predict_noise_range(x_t, context, t, params, 0, x_t.length, sc);
}

/// Workspace half-extent and feature scaling used by the context encoder.
constexpr double kWorkspaceHalf = 0.35;
constexpr double kRadiusScale = 0.1;
constexpr int kTemplateCount = 4;

/**
 * Deterministic context embedding: one-hot template id, task-ordered object
 * features (position, radius) scaled to [-1, 1], the goal-region center,
 * zero-padded to the context width.
 */
inline std::vector<double> encode_context(const TaskSpec& task, const WorldState& world,
                                          int context_dim = 32) {
  const int capacity = (context_dim - kTemplateCount - 3) / 4;
  if (static_cast<int>(world.objects.size()) > capacity)
    throw_invalid("encode_context: more objects than encoder capacity");

  std::vector<double> c(context_dim, 0.0);
  c[static_cast<int>(task.tmpl)] = 1.0;

  std::vector<int> order;
  for (int id : task.subjects) order.push_back(id);
  if (task.target >= 0) order.push_back(task.target);
  for (const auto& o : world.objects) {
    bool seen = false;
    for (int id : order)
      if (id == o.id) seen = true;
    if (!seen) order.push_back(o.id);
  }

  int k = kTemplateCount;
  for (int id : order) {
    const WorldObject* o = world.find(id);
    if (!o) throw_invalid("encode_context: task references unknown object id");
    c[k++] = o->position[0] / kWorkspaceHalf;
    c[k++] = o->position[1] / kWorkspaceHalf;
    c[k++] = o->position[2] / kWorkspaceHalf;
    c[k++] = o->radius / kRadiusScale;
  }
  k = kTemplateCount + 4 * capacity;
  if (task.target >= 0) {
    const WorldObject* tgt = world.find(task.target);
    if (!tgt) throw_invalid("encode_context: unknown target id");
    c[k++] = tgt->position[0] / kWorkspaceHalf;
    c[k++] = tgt->position[1] / kWorkspaceHalf;
    c[k++] = tgt->position[2] / kWorkspaceHalf;
  }
  return c;
}

/**
 * Training-time timestep assignment: pick 1-2 stage runs at random, give all
 * tokens of each picked run one shared timestep drawn uniformly from
 * [t_lo, t_hi], and mark every other token clean (t = 0).
 */
inline TimestepVector assign_stage_timesteps(const StageAnnotation& ann, Rng& rng, int t_lo = 400,
                                             int t_hi = 900) {
  const auto runs = ann.runs();
  if (runs.empty()) throw_invalid("assign_stage_timesteps: annotation has no stages");
  TimestepVector t(ann.length(), 0);
  const int n_runs = static_cast<int>(runs.size());
  const int n_pick = n_runs >= 2 ? rng.uniform_int(1, 2) : 1;
  std::vector<int> idx(n_runs);
  for (int i = 0; i < n_runs; ++i) idx[i] = i;
  for (int i = 0; i < n_pick; ++i) {
    const int j = rng.uniform_int(i, n_runs - 1);
    std::swap(idx[i], idx[j]);
  }
  std::vector<int> picked(idx.begin(), idx.begin() + n_pick);
  std::sort(picked.begin(), picked.end());
  for (int ri : picked) {
    const int tj = rng.uniform_int(t_lo, t_hi);
    for (int i = runs[ri].first; i <= runs[ri].second; ++i) t[i] = tj;
  }
  return t;
}

struct LossWeights {
  double eot = 5.0;
  double stage = 3.0;
  double traj = 1.0;
  double smooth = 0.1;
};

struct TrainSample {
  Trajectory x0;
  StageAnnotation ann;
  std::vector<double> context;
  TimestepVector t;
  Trajectory eps;
};

using TrainBatch = std::vector<TrainSample>;

namespace detail {

/// Shared loss/gradient evaluation; gradient filled when grad != nullptr.
inline double df_loss_impl(const HeadParams& params, const TrainBatch& batch,
                           const LossWeights& lw, const NoiseSchedule& sched, HeadParams* grad) {
  if (batch.empty()) throw_invalid("df_loss: empty batch");
  if (sched.steps != params.cfg.schedule_steps)
    throw_invalid("df_loss: schedule horizon differs from the head's");
  const HeadConfig& cfg = params.cfg;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;

  for (const TrainSample& s : batch) {
    const int L = s.x0.length;
    const double inv_L = 1.0 / static_cast<double>(L);
    const Trajectory x_t = forward_noise(s.x0, s.eps, s.t, sched);
    const StageContext sc = StageContext::from(s.ann);

    FilmCache cache(params, s.context);
    Trajectory eps_pred(L, cfg.action_dim);
    std::vector<TokenTape> tapes(grad ? L : 0);
    for (int i = 0; i < L; ++i)
      forward_token(params, cache, x_t, i, s.t[i], sc.ordinal[i], sc.phase[i], eps_pred.row(i),
                    grad ? &tapes[i] : nullptr);

    Trajectory xhat(L, cfg.action_dim);
    for (int i = 0; i < L; ++i) {
      if (s.t[i] == 0) {
        for (int d = 0; d < cfg.action_dim; ++d) xhat.at(i, d) = x_t.at(i, d);
      } else {
        const double a = sched.sqrt_ab(s.t[i]);
        const double bq = sched.sqrt_one_minus_ab(s.t[i]);
        for (int d = 0; d < cfg.action_dim; ++d)
          xhat.at(i, d) = (x_t.at(i, d) - bq * eps_pred.at(i, d)) / a;
      }
    }

    double noise_mse = 0.0, eot = 0.0, stage = 0.0, traj = 0.0, smooth = 0.0;
    for (int i = 0; i < L; ++i)
      for (int d = 0; d < cfg.action_dim; ++d) {
        const double e = eps_pred.at(i, d) - s.eps.at(i, d);
        noise_mse += e * e;
      }
    noise_mse *= inv_L;
    {
      const Vec3 e = xhat.pos(L - 1) - s.ann.final_goal;
      eot = dot(e, e);
    }
    for (int bix : s.ann.boundaries) {
      const Vec3 e = xhat.pos(bix) - s.ann.stage_goals[bix];
      stage += dot(e, e);
    }
    for (int i = 0; i < L; ++i)
      for (int d = 0; d < cfg.action_dim; ++d) {
        const double e = xhat.at(i, d) - s.x0.at(i, d);
        traj += e * e;
      }
    traj *= inv_L;
    for (int i = 1; i < L; ++i)
      for (int d = 0; d < cfg.action_dim; ++d) {
        const double e = xhat.at(i, d) - xhat.at(i - 1, d);
        smooth += e * e;
      }
    smooth *= inv_L;

    total += noise_mse + lw.eot * eot + lw.stage * stage + lw.traj * traj + lw.smooth * smooth;

    if (!grad) continue;

    // dL/dxhat, then fold into dL/deps_pred; tokens at t = 0 contribute only
    // through the noise MSE (their clean estimate is constant).
    Trajectory dxhat(L, cfg.action_dim);
    {
      const Vec3 e = xhat.pos(L - 1) - s.ann.final_goal;
      for (int d = 0; d < 3; ++d) dxhat.at(L - 1, d) += lw.eot * 2.0 * e[d];
    }
    for (int bix : s.ann.boundaries) {
      const Vec3 e = xhat.pos(bix) - s.ann.stage_goals[bix];
      for (int d = 0; d < 3; ++d) dxhat.at(bix, d) += lw.stage * 2.0 * e[d];
    }
    for (int i = 0; i < L; ++i)
      for (int d = 0; d < cfg.action_dim; ++d)
        dxhat.at(i, d) += lw.traj * inv_L * 2.0 * (xhat.at(i, d) - s.x0.at(i, d));
    for (int i = 0; i < L; ++i)
      for (int d = 0; d < cfg.action_dim; ++d) {
        double v = 0.0;
        if (i >= 1) v += 2.0 * (xhat.at(i, d) - xhat.at(i - 1, d));
        if (i + 1 < L) v -= 2.0 * (xhat.at(i + 1, d) - xhat.at(i, d));
        dxhat.at(i, d) += lw.smooth * inv_L * v;
      }

    std::vector<std::vector<std::vector<double>>> film_acc(
        cache.combos.size(),
        std::vector<std::vector<double>>(cfg.layers, std::vector<double>(3 * cfg.hidden, 0.0)));
    // Combos may grow while tokens are processed; cache is final by now.
    std::vector<double> d_eps(cfg.action_dim);
    for (int i = 0; i < L; ++i) {
      const double mse_c = 2.0 * inv_L * inv_batch;
      double chain = 0.0;
      if (s.t[i] != 0)
        chain = -sched.sqrt_one_minus_ab(s.t[i]) / sched.sqrt_ab(s.t[i]);
      for (int d = 0; d < cfg.action_dim; ++d) {
        d_eps[d] = mse_c * (eps_pred.at(i, d) - s.eps.at(i, d)) +
                   inv_batch * chain * dxhat.at(i, d);
      }
      backward_token(params, cache, tapes[i], d_eps.data(), *grad, film_acc);
    }
    flush_film(params, cache, film_acc, *grad);
  }
  return total * inv_batch;
}

}  // namespace detail

/// Stage- and geometry-aware training objective (mean over the batch).
inline double df_loss(const HeadParams& params, const TrainBatch& batch, const LossWeights& lw,
                      const NoiseSchedule& sched) {
  return detail::df_loss_impl(params, batch, lw, sched, nullptr);
}

/// Exact gradient of df_loss with respect to every parameter.
inline HeadParams loss_gradient(const HeadParams& params, const TrainBatch& batch,
                                const LossWeights& lw, const NoiseSchedule& sched,
                                double* loss_out = nullptr) {
  HeadParams grad = HeadParams::zeros(params.cfg);
  const double loss = detail::df_loss_impl(params, batch, lw, sched, &grad);
  if (loss_out) *loss_out = loss;
  return grad;
}

}  // namespace forge
