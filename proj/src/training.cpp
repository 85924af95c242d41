#include "sxda/training.hpp"

#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <mutex>
#include <thread>

#include "sxda/parallel.hpp"

namespace sxda {

template <typename T>
LossTerms<T> loss(Var<T> pred, Var<T> gt, T lambda_p) {
  if (pred.dims() != gt.dims())
    throw DimensionError("loss: prediction " + shape_str(pred.dims()) + " vs ground truth " +
                         shape_str(gt.dims()));
  if (pred.rank() != 3)
    throw DimensionError("loss: expected H x W x C frames, got " + shape_str(pred.dims()));
  const std::size_t c = pred.dim(2);
  // Sobel is linear, so Sobel(pred) - Sobel(gt) = Sobel(pred - gt).
  static constexpr int gx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  Tensor<T> kernel({3, 3, c, 2 * c});
  for (std::size_t ky = 0; ky < 3; ++ky)
    for (std::size_t kx = 0; kx < 3; ++kx)
      for (std::size_t ch = 0; ch < c; ++ch) {
        kernel.at({ky, kx, ch, 2 * ch}) = static_cast<T>(gx[ky][kx]);
        kernel.at({ky, kx, ch, 2 * ch + 1}) = static_cast<T>(gx[kx][ky]);
      }
  Tape<T>& tape = *pred.tape();
  Var<T> diff = ops::sub(pred, gt);
  Var<T> mse = ops::mean_all(ops::mul(diff, diff));
  Var<T> edge = ops::mean_all(ops::abs(ops::conv2d(diff, tape.constant(std::move(kernel)))));
  return LossTerms<T>{ops::add(mse, ops::scale(edge, lambda_p)), mse, edge};
}

template LossTerms<float> loss<float>(Var<float>, Var<float>, float);
template LossTerms<double> loss<double>(Var<double>, Var<double>, double);

AdamState AdamState::zeros_like(const std::vector<Tensor<float>>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.size(), 0.0);
    s.v.emplace_back(p.size(), 0.0);
  }
  return s;
}

void adam_step(std::vector<Tensor<float>>& params, const std::vector<std::vector<float>>& grads,
               AdamState& state, const AdamConfig& cfg, const std::vector<std::string>& names) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size())
    throw ContractError("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.m[i].size() != params[i].size() ||
        state.v[i].size() != params[i].size())
      throw DimensionError("adam_step: gradient/state size mismatch for parameter " +
                           (i < names.size() ? names[i] : std::to_string(i)));
    for (float g : grads[i])
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in parameter " +
                           (i < names.size() ? "'" + names[i] + "'" : "#" + std::to_string(i)));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1 - std::pow(cfg.beta1, t), bc2 = 1 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i].data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const float* g = grads[i].data();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      const double gk = g[k];
      m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * gk * gk;
      const double mhat = m[k] / bc1, vhat = v[k] / bc2;
      p[k] = static_cast<float>(static_cast<double>(p[k]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

double clip_global_norm(std::vector<std::vector<float>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& g : grads)
    for (float v : g) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (float& v : g) v = static_cast<float>(v * s);
  }
  return norm;
}

namespace {

Image crop(const Image& img, std::size_t oy, std::size_t ox, std::size_t patch) {
  const std::size_t w = img.dim(1), c = img.dim(2);
  Image out({patch, patch, c});
  for (std::size_t y = 0; y < patch; ++y) {
    const float* src = img.data() + ((oy + y) * w + ox) * c;
    std::copy(src, src + patch * c, out.data() + y * patch * c);
  }
  return out;
}

}  // namespace

TrainSample sample_triplet(const Clip& clip, Rng& rng, std::size_t patch) {
  if (clip.size() < 3)
    throw ConfigError("triplet sampling needs at least 3 frames, got " + std::to_string(clip.size()));
  const std::size_t h = clip.height(), w = clip.width();
  if (patch == 0 || patch > h || patch > w)
    throw ConfigError("patch " + std::to_string(patch) + " does not fit " + std::to_string(h) +
                      "x" + std::to_string(w) + " frames");
  TrainSample s;
  s.t = 1 + static_cast<std::size_t>(rng.below(clip.size() - 2));
  s.oy = static_cast<std::size_t>(rng.below(h - patch + 1));
  s.ox = static_cast<std::size_t>(rng.below(w - patch + 1));
  s.prev = crop(clip.frames[s.t - 1], s.oy, s.ox, patch);
  s.cur = crop(clip.frames[s.t], s.oy, s.ox, patch);
  s.next = crop(clip.frames[s.t + 1], s.oy, s.ox, patch);
  s.gt = crop(clip.gt_for(s.t), s.oy, s.ox, patch);
  return s;
}

void TrainConfig::validate() const {
  model.validate();
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  if (batch == 0) throw ConfigError("batch size must be at least 1");
  if (patch == 0 || patch % model.divisor() != 0)
    throw ConfigError("patch size " + std::to_string(patch) + " must be a positive multiple of " +
                      std::to_string(model.divisor()) + " (block x 2^(stages-1))");
  if (!(lambda_p >= 0)) throw ConfigError("lambda_p must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw ConfigError("Adam betas must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam epsilon must be positive");
  if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be non-negative");
  if (log_interval == 0) throw ConfigError("log interval must be at least 1");
  if (threads == 0) throw ConfigError("threads must be at least 1");
}

std::string format_log_line(const LossRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "iter %zu loss %.8g mse %.8g edge %.8g", r.iter, r.loss, r.mse,
                r.edge);
  return buf;
}

double smoothed_loss(const std::vector<LossRecord>& history, std::size_t iter, std::size_t window) {
  if (iter == 0 || iter > history.size() || window == 0)
    throw ContractError("smoothed_loss: iteration " + std::to_string(iter) + " outside history of " +
                        std::to_string(history.size()));
  const std::size_t begin = iter > window ? iter - window : 0;
  double s = 0;
  for (std::size_t i = begin; i < iter; ++i) s += history[i].loss;
  return s / static_cast<double>(iter - begin);
}

namespace {

struct Batch {
  std::vector<TrainSample> samples;
  std::uint64_t hash = 0;
};

// Samples batches ahead of the optimizer on a producer thread. The order of
// random draws is fixed, so the stream does not depend on timing.
class BatchQueue {
 public:
  BatchQueue(const std::vector<Clip>& clips, const TrainConfig& cfg)
      : clips_(clips), cfg_(cfg), rng_(derive_seed(cfg.seed, "batches")) {
    producer_ = std::thread([this] { run(); });
  }
  ~BatchQueue() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    producer_.join();
  }

  Batch pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || failure_; });
    if (queue_.empty()) std::rethrow_exception(failure_);
    Batch b = std::move(queue_.front());
    queue_.pop_front();
    cv_.notify_all();
    return b;
  }

 private:
  static constexpr std::size_t kCapacity = 2;

  void run() {
    try {
      for (std::size_t it = 0; it < cfg_.iterations; ++it) {
        Batch b;
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](std::uint64_t v) { h = splitmix64(h ^ v); };
        for (std::size_t e = 0; e < cfg_.batch; ++e) {
          const std::size_t c = static_cast<std::size_t>(rng_.below(clips_.size()));
          b.samples.push_back(sample_triplet(clips_[c], rng_, cfg_.patch));
          const TrainSample& s = b.samples.back();
          mix(c);
          mix(s.t);
          mix(s.oy);
          mix(s.ox);
        }
        b.hash = h;
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return queue_.size() < kCapacity || stop_; });
        if (stop_) return;
        queue_.push_back(std::move(b));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mu_);
      failure_ = std::current_exception();
      cv_.notify_all();
    }
  }

  const std::vector<Clip>& clips_;
  const TrainConfig& cfg_;
  Rng rng_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Batch> queue_;
  std::exception_ptr failure_;
  bool stop_ = false;
  std::thread producer_;
};

struct SampleResult {
  std::vector<std::vector<float>> grads;
  double loss = 0, mse = 0, edge = 0;
};

SampleResult run_sample(const ModelParams<float>& params, const TrainSample& s, float lambda_p) {
  Tape<float> tape;
  BoundModel<float> m = bind(tape, params);
  Triplet<float> tr{tape.constant(s.prev), tape.constant(s.cur), tape.constant(s.next)};
  Var<float> y = forward(m, tr, Mode::train);
  LossTerms<float> l = loss(y, tape.constant(s.gt), lambda_p);
  SampleResult r;
  r.loss = l.total.value()[0];
  r.mse = l.mse.value()[0];
  r.edge = l.edge.value()[0];
  if (!std::isfinite(r.loss)) return r;
  tape.backward(l.total);
  r.grads.reserve(m.vars.size());
  for (const auto& v : m.vars) {
    const Tensor<float> g = tape.grad(v);
    r.grads.emplace_back(g.storage().begin(), g.storage().end());
  }
  return r;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<Clip>& clips, const LogSink& log) {
  cfg.validate();
  if (clips.empty()) throw ConfigError("training dataset is empty");
  for (const auto& c : clips) {
    c.validate();
    if (cfg.patch > c.height() || cfg.patch > c.width())
      throw ConfigError("patch " + std::to_string(cfg.patch) + " does not fit " +
                        std::to_string(c.height()) + "x" + std::to_string(c.width()) + " clips");
  }
  TrainResult res{ModelParams<float>::init(cfg.model, cfg.seed), {}, {}};
  ModelParams<float>& params = res.params;
  std::vector<std::string> names;
  for (const auto& s : params.layout.specs) names.push_back(s.name);
  AdamState state = AdamState::zeros_like(params.tensors);
  const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  const auto lambda = static_cast<float>(cfg.lambda_p);

  BatchQueue queue(clips, cfg);
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    Batch batch = queue.pop();
    std::vector<SampleResult> results(batch.samples.size());
    parallel_for(batch.samples.size(), cfg.threads, [&](std::size_t e) {
      results[e] = run_sample(params, batch.samples[e], lambda);
    });

    // Fixed-order reduction keeps the update independent of thread count.
    LossRecord rec{it, 0, 0, 0};
    const double inv = 1.0 / static_cast<double>(results.size());
    for (const auto& r : results) {
      if (!std::isfinite(r.loss))
        throw NumericError("non-finite loss at iteration " + std::to_string(it));
      rec.loss += r.loss * inv;
      rec.mse += r.mse * inv;
      rec.edge += r.edge * inv;
    }
    std::vector<std::vector<float>> grads(params.tensors.size());
    for (std::size_t i = 0; i < grads.size(); ++i) {
      grads[i].assign(params.tensors[i].size(), 0.0f);
      for (std::size_t k = 0; k < grads[i].size(); ++k) {
        double s = 0;
        for (const auto& r : results) s += r.grads[i][k];
        grads[i][k] = static_cast<float>(s * inv);
      }
    }
    clip_global_norm(grads, cfg.clip_norm);
    adam_step(params.tensors, grads, state, adam, names);

    res.history.push_back(rec);
    res.batch_hashes.push_back(batch.hash);
    if (log && (it % cfg.log_interval == 0 || it == cfg.iterations)) log(format_log_line(rec));
    if (cfg.checkpoint && cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 &&
        it != cfg.iterations)
      save_checkpoint(params, *cfg.checkpoint);
  }
  if (cfg.checkpoint) save_checkpoint(params, *cfg.checkpoint);
  return res;
}

std::vector<Clip> load_training_clips(const std::filesystem::path& corpus) {
  const CorpusIndex idx = read_corpus_index(corpus);
  std::vector<Clip> clips;
  for (const auto& rel : idx.train) clips.push_back(read_clip(corpus / rel));
  if (clips.empty()) throw ConfigError("corpus " + corpus.string() + " has no training clips");
  return clips;
}

}  // namespace sxda
