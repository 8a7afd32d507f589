#include "protodiff/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "protodiff/nd/ops.hpp"
#include "protodiff/seeding.hpp"

namespace protodiff::trainer {

void TrainConfig::validate() const {
  if (batch == 0) throw std::invalid_argument("train: batch must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  if (warmup > steps && steps > 0) {
    throw std::invalid_argument("train: warmup " + std::to_string(warmup) + " exceeds steps " +
                                std::to_string(steps));
  }
  if (!(p_drop >= 0.0 && p_drop < 1.0)) {
    throw std::invalid_argument("train: p_drop must lie in [0, 1)");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0)) {
    throw std::invalid_argument("train: invalid Adam constants");
  }
  model.validate();
  (void)schedule.build();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"batch", c.batch},
                     {"lr", c.lr},
                     {"warmup", c.warmup},
                     {"p_drop", c.p_drop},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"schedule", c.schedule},
                     {"model", c.model}};
}

std::vector<double> sampling_weights(const dataio::DomainCorpus& corpus) {
  std::vector<double> w;
  const double domains = static_cast<double>(corpus.domains.size());
  for (const auto& d : corpus.domains) {
    if (d.windows.empty()) throw std::invalid_argument("domain '" + d.name + "' is empty");
    const double wi = 1.0 / (static_cast<double>(d.windows.size()) * domains);
    w.insert(w.end(), d.windows.size(), wi);
  }
  return w;
}

std::vector<Draw> balanced_sample(const dataio::DomainCorpus& corpus, std::size_t batch,
                                  std::mt19937_64& rng) {
  if (corpus.domains.empty()) throw std::invalid_argument("balanced_sample: corpus has no domains");
  for (const auto& d : corpus.domains) {
    if (d.windows.empty()) {
      throw std::invalid_argument("balanced_sample: domain '" + d.name + "' is empty");
    }
  }
  std::uniform_int_distribution<std::size_t> pick_domain(0, corpus.domains.size() - 1);
  std::vector<Draw> out(batch);
  for (auto& dr : out) {
    dr.domain = pick_domain(rng);
    const auto n = corpus.domains[dr.domain].windows.size();
    dr.index = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  }
  return out;
}

PreparedBatch prepare_batch(const dataio::DomainCorpus& corpus, std::span<const Draw> draws,
                            const schedule::NoiseSchedule& sched, double p_drop,
                            std::mt19937_64& rng) {
  PreparedBatch b;
  b.batch = draws.size();
  b.length = corpus.length;
  const std::size_t len = corpus.length;
  b.x0.resize(b.batch * len);
  b.eps.resize(b.batch * len);
  b.xn.resize(b.batch * len);
  b.steps.resize(b.batch);
  b.dropped.resize(b.batch);
  std::uniform_int_distribution<int> pick_step(1, sched.steps());
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const auto& w = corpus.domains.at(draws[i].domain).windows.at(draws[i].index);
    if (w.size() != len) throw std::invalid_argument("prepare_batch: window length mismatch");
    std::copy(w.begin(), w.end(), b.x0.begin() + static_cast<std::ptrdiff_t>(i * len));
    b.dropped[i] = protonet::draw_drop(p_drop, rng) ? 1 : 0;
    const int n = pick_step(rng);
    b.steps[i] = static_cast<std::size_t>(n);
    for (std::size_t t = 0; t < len; ++t) b.eps[i * len + t] = static_cast<float>(gauss(rng));
    const std::span<const float> x0(b.x0.data() + i * len, len), eps(b.eps.data() + i * len, len);
    const auto xn = schedule::corrupt(x0, n, eps, sched);
    std::copy(xn.begin(), xn.end(), b.xn.begin() + static_cast<std::ptrdiff_t>(i * len));
  }
  return b;
}

template <typename T>
nd::Tensor<T> mse(const nd::Tensor<T>& eps_hat, const nd::Tensor<T>& eps) {
  auto d = nd::sub(eps_hat, eps);
  return nd::mean(nd::mul(d, d));
}

template <typename T>
nd::Tensor<T> conditional_loss(const protonet::Denoiser<T>& den, const PreparedBatch& b) {
  const nd::Shape shape{b.batch, b.length};
  auto as_t = [&](const std::vector<float>& v) {
    return nd::Tensor<T>(shape, std::vector<T>(v.begin(), v.end()));
  };
  protonet::Conditioning<T> cond;
  if (den.config().mode != protonet::ConditionMode::unconditional) {
    cond.weights = den.assign(as_t(b.x0));
  }
  cond.dropped = b.dropped;
  cond.degenerate_to_uncond = true;
  auto eps_hat = den.predict(as_t(b.xn), b.steps, cond);
  return mse(eps_hat, as_t(b.eps));
}

template nd::Tensor<float> mse(const nd::Tensor<float>&, const nd::Tensor<float>&);
template nd::Tensor<double> mse(const nd::Tensor<double>&, const nd::Tensor<double>&);
template nd::Tensor<float> conditional_loss(const protonet::Denoiser<float>&,
                                            const PreparedBatch&);
template nd::Tensor<double> conditional_loss(const protonet::Denoiser<double>&,
                                             const PreparedBatch&);

void Adam::step(protonet::DenoiserParams& params, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    auto g = p.grad();
    if (g.empty()) continue;
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
      v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mh / (std::sqrt(vh) + eps_));
    }
  }
}

double warmup_lr(std::size_t step, double lr, std::size_t warmup) {
  if (warmup == 0 || step >= warmup) return lr;
  return lr * static_cast<double>(step) / static_cast<double>(warmup);
}

namespace {
std::uint64_t bank_seed(std::uint64_t seed) { return make_rng(seed, streams::bank)(); }
}  // namespace

Trainer::Trainer(dataio::DomainCorpus corpus, TrainConfig config, dataio::NormTable norms)
    : corpus_(std::move(corpus)),
      config_(std::move(config)),
      norms_(std::move(norms)),
      sched_((config_.validate(), config_.schedule.build())),
      bank_(protonet::init_prototypes(config_.model.prototypes, config_.model.width,
                                      bank_seed(config_.seed))),
      params_(protonet::init_params(config_.model, config_.seed)),
      den_(config_.model, params_, bank_),
      adam_(config_.beta1, config_.beta2, config_.adam_eps),
      rng_(make_rng(config_.seed, streams::train)) {
  corpus_.validate();
  if (corpus_.length != config_.model.length) {
    throw std::invalid_argument("train: corpus length " + std::to_string(corpus_.length) +
                                " differs from model length " +
                                std::to_string(config_.model.length));
  }
  params_.set_requires_grad(true);
}

double Trainer::step() {
  const auto draws = balanced_sample(corpus_, config_.batch, rng_);
  const auto b = prepare_batch(corpus_, draws, sched_, config_.p_drop, rng_);
  ++done_;

  auto diagnose = [&](const std::string& what) {
    std::ostringstream os;
    os << "step " << done_ << ": " << what << "; n = [";
    for (std::size_t i = 0; i < b.steps.size(); ++i) os << (i ? " " : "") << b.steps[i];
    os << "]";
    return os.str();
  };

  double loss = 0.0;
  {
    nd::Tape<float> tape;
    nd::TapeScope<float> scope(tape);
    try {
      auto l = conditional_loss(den_, b);
      loss = l.item();
      if (!std::isfinite(loss)) throw TrainingError(diagnose("non-finite loss " + std::to_string(loss)));
      tape.backward(l);
    } catch (const nd::NonFiniteError& e) {
      throw TrainingError(diagnose(std::string("non-finite loss (") + e.what() + ")"));
    }
  }
  adam_.step(params_, warmup_lr(done_, config_.lr, config_.warmup));
  params_.zero_grad();
  return loss;
}

protonet::Checkpoint Trainer::checkpoint() const {
  protonet::Checkpoint ck;
  ck.model = config_.model;
  ck.schedule = config_.schedule;
  ck.norms = norms_;
  ck.seed = config_.seed;
  ck.meta = nlohmann::json{{"train", config_}, {"steps_done", done_}};
  for (const auto& [name, t] : params_) {
    ck.params.add(name, nd::Tensor<float>(t.shape(), std::vector<float>(t.data().begin(), t.data().end())));
  }
  ck.bank = bank_;
  return ck;
}

TrainResult train(const dataio::DomainCorpus& corpus, const TrainConfig& config,
                  const dataio::NormTable& norms, const std::optional<std::filesystem::path>& out_dir,
                  const Progress& progress) {
  Trainer tr(corpus, config, norms);
  TrainResult res;
  std::ofstream curve;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    curve.open(*out_dir / "loss.csv", std::ios::trunc);
    if (!curve) throw std::runtime_error("cannot write " + (*out_dir / "loss.csv").string());
    curve << "step,loss\n" << std::setprecision(9);
  }
  for (std::size_t s = 0; s < config.steps; ++s) {
    const double loss = tr.step();
    res.losses.push_back(loss);
    if (out_dir) {
      curve << tr.steps_done() << ',' << loss << '\n';
      if (config.checkpoint_every && tr.steps_done() % config.checkpoint_every == 0 &&
          tr.steps_done() != config.steps) {
        protonet::save_checkpoint(*out_dir / ("ckpt_" + std::to_string(tr.steps_done()) + ".bin"),
                                  tr.checkpoint());
      }
    }
    if (progress) progress(tr.steps_done(), loss);
  }
  res.checkpoint = tr.checkpoint();
  if (out_dir) {
    curve.flush();
    if (!curve) throw std::runtime_error("failed writing loss curve");
    protonet::save_checkpoint(*out_dir / "final.bin", res.checkpoint);
  }
  return res;
}

}  // namespace protodiff::trainer
