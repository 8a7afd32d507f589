// Acceptance suite: runs the ten release criteria and prints one PASS/FAIL
// line per criterion. Exit status is non-zero when any criterion fails.
//
//   protodiff_acceptance --work DIR [--only 1,2,7]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "protodiff/cli.hpp"
#include "protodiff/metrics.hpp"
#include "protodiff/nd/ops.hpp"
#include "protodiff/protonet/checkpoint.hpp"
#include "protodiff/protonet/denoiser.hpp"
#include "protodiff/sampler.hpp"
#include "protodiff/schedule.hpp"
#include "protodiff/seeding.hpp"
#include "protodiff/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/stats.hpp"
#include "support/tiny.hpp"

namespace fs = std::filesystem;
using namespace protodiff;
using nd::Tensor;
using protodiff::testing::gradcheck;
using protodiff::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void log(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

// Desk-scale experiment shared by criteria 4 and 7-9.
constexpr std::uint64_t kTrainSeed = 1;
constexpr std::uint64_t kTrainDataSeed = 7;
constexpr std::uint64_t kTestDataSeed = 99;
constexpr std::size_t kWindowsPerDomain = 200;
constexpr std::size_t kTestWindows = 400;

trainer::TrainConfig desk_config(protonet::ConditionMode mode) {
  trainer::TrainConfig c;
  c.steps = 2000;
  c.batch = 32;
  c.lr = 3e-4;
  c.warmup = 100;
  c.p_drop = 0.1;
  c.seed = kTrainSeed;
  c.schedule = schedule::ScheduleConfig::scaled(100);
  c.model.length = 24;
  c.model.mode = mode;
  return c;
}

struct DeskRun {
  trainer::TrainResult result;
  protonet::PrototypeBank bank_at_init;
  double seconds = 0.0;
};

class Context {
 public:
  explicit Context(fs::path work) : work_(std::move(work)) {}

  const fs::path& work() const { return work_; }

  const dataio::DomainCorpus& raw_train() {
    if (!raw_train_) raw_train_ = dataio::synth_corpus(dataio::desk_spec(24, kWindowsPerDomain, true), kTrainDataSeed);
    return *raw_train_;
  }

  const dataio::DomainCorpus& raw_test() {
    if (!raw_test_) raw_test_ = dataio::synth_corpus(dataio::desk_spec(24, kTestWindows, true), kTestDataSeed);
    return *raw_test_;
  }

  // Training corpus without the held-out square domain, normalized per domain.
  std::pair<dataio::DomainCorpus, dataio::NormTable> train_corpus() {
    dataio::DomainCorpus c;
    c.length = 24;
    for (const auto& d : raw_train().domains) {
      if (d.name != "square") c.domains.push_back(d);
    }
    auto norms = dataio::normalize_corpus(c, dataio::NormMode::minmax);
    return {c, norms};
  }

  const DeskRun& prompted() { return run(prompted_, protonet::ConditionMode::prototypes, "prompted"); }
  const DeskRun& unconditional() {
    return run(uncond_, protonet::ConditionMode::unconditional, "no_prompt");
  }

 private:
  const DeskRun& run(std::optional<DeskRun>& slot, protonet::ConditionMode mode, const std::string& name) {
    if (slot) return *slot;
    auto [corpus, norms] = train_corpus();
    const auto cfg = desk_config(mode);
    DeskRun r;
    r.bank_at_init = trainer::Trainer(corpus, cfg, norms).bank();
    log("training " + name + " model (" + std::to_string(cfg.steps) + " steps)");
    const auto t0 = Clock::now();
    r.result = trainer::train(corpus, cfg, norms, work_ / name, [&](std::size_t step, double loss) {
      if (step % 250 == 0) log(name + " step " + std::to_string(step) + " loss " + fmt(loss));
    });
    r.seconds = seconds_since(t0);
    slot = std::move(r);
    return *slot;
  }

  fs::path work_;
  std::optional<dataio::DomainCorpus> raw_train_, raw_test_;
  std::optional<DeskRun> prompted_, uncond_;
};

// -- 1 -------------------------------------------------------------------------

Outcome gradient_correctness(Context&) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0, cases = 0;
  auto check = [&](const std::string& name, std::vector<Tensor<double>> leaves,
                   const std::function<Tensor<double>()>& f, std::size_t per_leaf = 0) {
    const auto rep = gradcheck(std::move(leaves), f, 1e-4, per_leaf);
    checked += rep.checked;
    ++cases;
    if (rep.max_rel >= worst) {
      worst = rep.max_rel;
      worst_name = name + " " + rep.worst;
    }
  };

  auto a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2);
  check("add", {a, b}, [&] { return nd::add(a, b); });
  check("sub", {a, b}, [&] { return nd::sub(a, b); });
  check("mul", {a, b}, [&] { return nd::mul(a, b); });
  check("scale", {a}, [&] { return nd::scale(a, -1.7); });
  check("add_scalar", {a}, [&] { return nd::add_scalar(a, 0.3); });
  check("silu", {a}, [&] { return nd::silu(a); });
  check("relu", {a}, [&] { return nd::relu(a); });

  auto c3 = random_tensor({2, 3, 4}, 3);
  check("sum", {c3}, [&] { return nd::sum(c3); });
  check("mean", {c3}, [&] { return nd::mean(c3); });
  for (std::size_t ax = 0; ax < 3; ++ax) check("mean_axis", {c3}, [&] { return nd::mean_axis(c3, ax); });

  auto m = random_tensor({4, 5}, 4), bias = random_tensor({5}, 5), x2 = random_tensor({3, 4}, 6);
  check("matmul", {x2, m}, [&] { return nd::matmul(x2, m); });
  check("linear", {x2, m, bias}, [&] { return nd::linear(x2, m, bias); });

  auto x = random_tensor({2, 3, 9}, 7), w = random_tensor({4, 3, 3}, 8), cb = random_tensor({4}, 9);
  check("conv1d", {x, w, cb}, [&] { return nd::conv1d(x, w, cb, {1, 1}); });
  check("conv1d/s2", {x, w, cb}, [&] { return nd::conv1d(x, w, cb, {2, 1}); });
  auto wt = random_tensor({3, 2, 4}, 10), bt = random_tensor({2}, 11);
  check("conv_transpose1d", {x, wt, bt}, [&] { return nd::conv_transpose1d(x, wt, bt, {2, 1}); });

  auto logits = random_tensor({2, 3, 5}, 12);
  check("softmax", {logits}, [&] { return nd::softmax(logits, 2); });
  auto sb = random_tensor({2, 5}, 13, 0.0, 1.0);
  std::vector<std::uint8_t> active{1, 0, 1, 1, 0, 0, 1, 1, 1, 1};
  check("biased_softmax", {logits, sb}, [&] { return nd::biased_softmax(logits, sb, active); });
  auto q = random_tensor({2, 3, 8}, 14), k = random_tensor({2, 4, 8}, 15), v = random_tensor({2, 4, 8}, 16);
  check("multihead_scores", {q, k}, [&] { return nd::multihead_scores(q, k, 2, 0.35); });
  auto probs = random_tensor({2, 6, 4}, 17, 0.0, 1.0);
  check("multihead_mix", {probs, v}, [&] { return nd::multihead_mix(probs, v, 2); });

  auto s2 = random_tensor({2, 2, 4}, 18), vec = random_tensor({2, 3}, 19);
  check("reshape", {c3}, [&] { return nd::reshape(c3, {6, 4}); });
  check("transpose_last2", {c3}, [&] { return nd::transpose_last2(c3); });
  check("concat", {c3, s2}, [&] { return nd::concat<double>({c3, s2}, 1); });
  check("pad_last", {c3}, [&] { return nd::pad_last(c3, 3); });
  check("slice_last", {c3}, [&] { return nd::slice_last(c3, 1, 2); });
  check("broadcast_positions", {vec}, [&] { return nd::broadcast_positions(vec, 5); });
  check("broadcast_batch", {vec}, [&] { return nd::broadcast_batch(vec, 4); });

  // composed: the full denoiser plus extractor, every parameter array
  auto cfg = protodiff::testing::tiny_model(16);
  auto bank = protonet::init_prototypes(cfg.prototypes, cfg.width, 1);
  auto params = protonet::init_params(cfg, 2).cast<double>();
  protonet::Denoiser<double> den(cfg, params, bank);
  auto x0 = random_tensor({2, 16}, 20), xn = random_tensor({2, 16}, 21);
  std::vector<Tensor<double>> leaves;
  for (auto& [name, t] : params) leaves.push_back(t);
  const std::vector<std::size_t> steps{3, 17};
  check("denoiser", leaves, [&] {
    protonet::Conditioning<double> cond;
    cond.degenerate_to_uncond = true;
    cond.weights = den.assign(x0);
    return den.predict(xn, steps, cond);
  }, 4);

  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-3 && secs < 120.0;
  return {pass, std::to_string(cases) + " cases, " + std::to_string(checked) +
                    " entries, max rel err " + fmt(worst, 3) + " (tol 1e-3), " + fmt(secs, 3) +
                    " s (limit 120 s); worst: " + worst_name};
}

// -- 2 -------------------------------------------------------------------------

Outcome diffusion_algebra(Context&) {
  const auto sched = schedule::ScheduleConfig::scaled(100).build();
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;

  double round_trip = 0.0, round_trip_f32 = 0.0;
  for (int n = 1; n <= sched.steps(); ++n) {
    std::vector<double> x0(64), eps(64);
    for (auto& v : x0) v = g(rng);
    for (auto& v : eps) v = g(rng);
    const auto back = schedule::x0_form_step(schedule::corrupt(x0, n, eps, sched), eps, n, sched);
    for (std::size_t i = 0; i < x0.size(); ++i) round_trip = std::max(round_trip, std::abs(back[i] - x0[i]));
    std::vector<float> xf(x0.begin(), x0.end()), ef(eps.begin(), eps.end());
    const auto bf = schedule::x0_form_step(schedule::corrupt(xf, n, ef, sched), ef, n, sched);
    for (std::size_t i = 0; i < xf.size(); ++i) {
      round_trip_f32 = std::max(round_trip_f32, std::abs(double(bf[i]) - xf[i]));
    }
  }

  bool monotone = true;
  for (int n = 2; n <= sched.steps(); ++n) monotone &= sched.alpha_bar(n) < sched.alpha_bar(n - 1);

  // x0 = 0.7 everywhere; Var(x_n) should be 1 - abar_n. One set of draws is
  // reused for every n so the check carries a single sampling error instead
  // of one per step.
  const std::size_t draws = 10000;
  double worst_var = 0.0;
  int worst_n = 0;
  std::normal_distribution<float> gf;
  std::vector<float> x0(draws, 0.7f), eps(draws);
  for (auto& v : eps) v = gf(rng);
  for (int n = 1; n <= sched.steps(); ++n) {
    const auto xn = schedule::corrupt(x0, n, eps, sched);
    double mean = 0.0, sq = 0.0;
    for (float v : xn) mean += v;
    mean /= draws;
    for (float v : xn) sq += (v - mean) * (v - mean);
    const double var = sq / (draws - 1);
    const double rel = std::abs(var / (1.0 - sched.alpha_bar(n)) - 1.0);
    if (rel > worst_var) {
      worst_var = rel;
      worst_n = n;
    }
  }
  const bool pass = round_trip < 1e-5 && monotone && worst_var < 0.05;
  return {pass, "round-trip max err " + fmt(round_trip, 3) + " in float64 (float32 storage: " +
                    fmt(round_trip_f32, 3) + "), abar monotone: " + (monotone ? "yes" : "no") +
                    ", worst variance deviation " + fmt(100 * worst_var, 3) + "% at n=" +
                    std::to_string(worst_n)};
}

// -- 3 -------------------------------------------------------------------------

Outcome mask_semantics(Context&) {
  protonet::ModelConfig cfg;
  cfg.length = 24;
  const auto bank = protonet::init_prototypes(cfg.prototypes, cfg.width, 3);
  const auto params = protonet::init_params(cfg, 4);
  const protonet::Denoiser<float> den(cfg, params, bank);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> g(0.0f, 2.0f);
  std::uniform_int_distribution<int> step(1, 100);
  const std::size_t np = cfg.prototypes, d = cfg.width;

  std::size_t identical = 0, inactive_total = 0;
  const std::size_t trials = 100;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    std::vector<float> w(np);
    for (auto& v : w) v = g(rng);
    w[trial % np] = std::abs(w[trial % np]) + 0.1f;  // at least one active
    std::vector<float> x(cfg.length);
    for (auto& v : x) v = g(rng);
    const Tensor<float> xn({1, cfg.length}, x);
    const std::vector<std::size_t> n{static_cast<std::size_t>(step(rng))};

    protonet::Conditioning<float> c;
    c.weights = Tensor<float>({1, np}, w);
    const auto ref = den.predict(xn, n, c);

    auto mutated = bank;
    auto w2 = w;
    for (std::size_t j = 0; j < np; ++j) {
      if (w[j] > 0.0f) continue;
      ++inactive_total;
      for (std::size_t k = 0; k < d; ++k) mutated.rows[j * d + k] = g(rng);
      w2[j] = -std::abs(g(rng));
    }
    const protonet::Denoiser<float> den2(cfg, params, mutated);
    protonet::Conditioning<float> c2;
    c2.weights = Tensor<float>({1, np}, w2);
    const auto out = den2.predict(xn, n, c2);
    if (std::memcmp(ref.data().data(), out.data().data(), ref.size() * sizeof(float)) == 0) ++identical;
  }
  return {identical == trials, std::to_string(identical) + "/" + std::to_string(trials) +
                                   " trials bit-identical after mutating " +
                                   std::to_string(inactive_total) +
                                   " inactive prototype rows and weights"};
}

// -- 4 -------------------------------------------------------------------------

Outcome frozen_bank(Context& ctx) {
  const auto& run = ctx.prompted();
  const auto& before = run.bank_at_init.rows;
  const auto& after = run.result.checkpoint.bank.rows;
  const auto saved = protonet::load_checkpoint(ctx.work() / "prompted" / "final.bin").bank.rows;
  const bool same = before.size() == after.size() &&
                    std::memcmp(before.data(), after.data(), before.size() * sizeof(float)) == 0 &&
                    std::memcmp(before.data(), saved.data(), before.size() * sizeof(float)) == 0;
  return {same, std::to_string(before.size() * sizeof(float)) + " bank bytes " +
                    (same ? "identical" : "DIFFERENT") + " before and after " +
                    std::to_string(run.result.losses.size()) + " steps (in memory and on disk)"};
}

// -- 5 -------------------------------------------------------------------------

Outcome balanced_sampler(Context&) {
  dataio::DomainCorpus c;
  c.length = 1;
  for (std::size_t n : {10u, 40u, 400u}) {
    c.domains.push_back({"d" + std::to_string(n), std::vector<dataio::Window>(n, dataio::Window{0.0f})});
  }
  const auto w = trainer::sampling_weights(c);
  const bool weights_ok = std::abs(w.front() - 1.0 / 30) < 1e-15 && std::abs(w.back() - 1.0 / 1200) < 1e-15;
  std::mt19937_64 rng(make_rng(5, streams::train));
  std::vector<std::size_t> counts(3, 0);
  const std::size_t draws = 30000;
  for (std::size_t i = 0; i < draws / 30; ++i) {
    for (const auto& d : trainer::balanced_sample(c, 30, rng)) ++counts[d.domain];
  }
  const double p = protodiff::testing::chi_square_uniform_pvalue(counts);
  return {p > 0.01 && weights_ok, "counts " + std::to_string(counts[0]) + "/" + std::to_string(counts[1]) + "/" +
                                      std::to_string(counts[2]) + " over " + std::to_string(draws) +
                                      " draws, chi-square p = " + fmt(p) + " (alpha 0.01)"};
}

// -- 6 -------------------------------------------------------------------------

Outcome metric_oracles(Context&) {
  using metrics::SampleSet;
  std::vector<std::string> failed;
  auto near = [&](const std::string& what, double got, double want) {
    if (!(std::abs(got - want) <= 1e-5)) failed.push_back(what + "=" + fmt(got, 8));
  };
  near("mmd", metrics::mmd({{0.0f}}, {{1.0f}}, 1.0), std::sqrt(2.0 - 2.0 * std::exp(-0.5)));
  near("mmd_hand", metrics::mmd({{0.0f}}, {{1.0f}}, 1.0), 0.88710);
  const double p[] = {0.5, 0.5}, q[] = {0.25, 0.75};
  near("kl", metrics::kl_from_probabilities(p, q), 0.14384);
  if (std::abs(metrics::kl_from_probabilities(q, p) - metrics::kl_from_probabilities(p, q)) < 1e-6) {
    failed.push_back("kl symmetric");
  }
  const SampleSet real{{0.0f}, {1.0f}}, synth{{0.0f}, {1.0f}, {1.0f}, {1.0f}};
  near("mdd", metrics::mdd(real, synth, 2), 0.25);
  near("kl_hist", metrics::kl(real, synth, 2), 0.5 * std::log(1.5) + 0.5 * std::log(0.75));

  std::mt19937_64 rng(6);
  std::normal_distribution<float> g;
  SampleSet a(40, dataio::Window(12)), b(30, dataio::Window(12));
  for (auto* s : {&a, &b}) {
    for (auto& r : *s) {
      for (auto& v : r) v = g(rng);
    }
  }
  if (!(metrics::mmd(a, a) < 1e-7) || metrics::kl(a, a) != 0.0 || metrics::mdd(a, a) != 0.0) {
    failed.push_back("identical sets not zero");
  }
  const auto ref = metrics::evaluate(a, b);
  std::shuffle(a.begin(), a.end(), rng);
  std::shuffle(b.begin(), b.end(), rng);
  const auto perm = metrics::evaluate(a, b);
  if (ref.mmd != perm.mmd || ref.kl != perm.kl || ref.mdd != perm.mdd) failed.push_back("row order changes value");

  std::string detail = "mmd " + fmt(metrics::mmd({{0.0f}}, {{1.0f}}, 1.0), 6) + ", kl " +
                       fmt(metrics::kl_from_probabilities(p, q), 6) + ", mdd " +
                       fmt(metrics::mdd(real, synth, 2), 6) + "; zero on identical sets; permutation-invariant";
  if (!failed.empty()) {
    detail += "; failed:";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty(), detail};
}

// -- 7 -------------------------------------------------------------------------

Outcome convergence(Context& ctx) {
  const auto& run = ctx.prompted();
  const auto& l = run.result.losses;
  const double first = std::accumulate(l.begin(), l.begin() + 100, 0.0) / 100;
  const double last = std::accumulate(l.end() - 100, l.end(), 0.0) / 100;
  return {last < 0.5 * first, "first-100 mean " + fmt(first) + ", last-100 mean " + fmt(last) +
                                  " (ratio " + fmt(last / first, 3) + ", need < 0.5); " +
                                  fmt(run.seconds / 60, 3) + " min for " + std::to_string(l.size()) +
                                  " steps (target < 20 min)"};
}

// -- 8 -------------------------------------------------------------------------

std::vector<dataio::Window> take_shots(const std::vector<dataio::Window>& pool, std::size_t k,
                                       std::uint64_t seed) {
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_rng(seed, streams::shots);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<dataio::Window> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[idx[i]]);
  return out;
}

Outcome prompt_discrimination(Context& ctx) {
  const auto& pr = ctx.prompted().result.checkpoint;
  const auto& un = ctx.unconditional().result.checkpoint;
  const protonet::Denoiser<float> den(pr.model, pr.params, pr.bank);
  const protonet::Denoiser<float> den_u(un.model, un.params, un.bank);
  const auto sched = pr.schedule.build();

  sampler::GenerateOptions opts;
  opts.count = 100;
  opts.seed = 5;
  const std::vector<std::string> names{"sine", "trend", "ar1"};
  std::vector<std::vector<dataio::Window>> gen, real;
  for (const auto& name : names) {
    const auto& st = pr.norms.at(name);
    const auto shots = dataio::apply_norm(take_shots(ctx.raw_train().at(name).windows, 10, 8), st);
    const auto prompt = sampler::build_domain_prompt(den, shots, name);
    log("sampling " + name);
    gen.push_back(sampler::generate(den, sched, prompt, opts));
    real.push_back(dataio::apply_norm(ctx.raw_test().at(name).windows, st));
  }
  log("sampling no-prompt model");
  const auto uncond = sampler::generate_unconditional(den_u, sched, opts);

  std::ostringstream os;
  int ordered_ok = 0, beats_uncond = 0;
  std::vector<double> own(3);
  for (std::size_t i = 0; i < 3; ++i) own[i] = metrics::mmd(real[i], gen[i]);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      if (i == j) continue;
      // generated from domain i compared with real domain j
      const double cross = metrics::mmd(real[j], gen[i]);
      if (own[i] < cross) ++ordered_ok;
      os << names[i] << "->" << names[j] << " " << fmt(cross, 3) << (own[i] < cross ? "" : "(!)") << " ";
    }
  }
  std::ostringstream us;
  for (std::size_t i = 0; i < 3; ++i) {
    const double u = metrics::mmd(real[i], uncond);
    if (own[i] < u) ++beats_uncond;
    us << names[i] << " " << fmt(own[i], 3) << " vs " << fmt(u, 3) << "; ";
  }
  const bool pass = ordered_ok == 6 && beats_uncond >= 2;
  return {pass, "own<cross " + std::to_string(ordered_ok) + "/6 [" + os.str() + "]; prompted<no-prompt " +
                    std::to_string(beats_uncond) + "/3 [" + us.str() + "]"};
}

// -- 9 -------------------------------------------------------------------------

Outcome unseen_domain(Context& ctx) {
  const auto& pr = ctx.prompted().result.checkpoint;
  if (pr.norms.count("square")) return {false, "square domain leaked into training"};
  const protonet::Denoiser<float> den(pr.model, pr.params, pr.bank);
  const auto sched = pr.schedule.build();

  // Unseen domain: normalization fitted on its own shot pool, as `sample` does.
  const auto& pool = ctx.raw_train().at("square").windows;
  const auto st = dataio::fit_norm(pool, dataio::NormMode::minmax);
  const auto test = dataio::apply_norm(ctx.raw_test().at("square").windows, st);

  const std::vector<std::size_t> ks{3, 10};
  const std::size_t seeds = 5;
  std::vector<double> mean(ks.size(), 0.0);
  std::vector<double> active(ks.size(), 0.0);
  std::ostringstream per_seed;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    per_seed << "s" << s << ":";
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
      const auto shots = dataio::apply_norm(take_shots(pool, ks[ki], s), st);
      const auto prompt = sampler::build_domain_prompt(den, shots, "square");
      for (const auto& m : prompt.masks) active[ki] += double(m.active_count()) / ks[ki] / seeds;
      sampler::GenerateOptions opts;
      opts.count = 200;
      opts.seed = 100 + s;
      log("square K=" + std::to_string(ks[ki]) + " seed " + std::to_string(s));
      const double m = metrics::mmd(test, sampler::generate(den, sched, prompt, opts));
      mean[ki] += m / seeds;
      per_seed << (ki ? "/" : "") << fmt(m, 3);
    }
    per_seed << " ";
  }
  const bool pass = mean[1] <= mean[0];
  return {pass, "mean MMD K=3 " + fmt(mean[0]) + ", K=10 " + fmt(mean[1]) +
                    " (need non-increasing); per seed K3/K10 " + per_seed.str() +
                    "; mean active prototypes per shot " + fmt(active[0], 3) + "/" + fmt(active[1], 3)};
}

// -- 10 ------------------------------------------------------------------------

Outcome determinism(Context& ctx) {
  std::vector<std::string> problems;

  // checkpoint round trip
  const auto path = ctx.work() / "prompted" / "final.bin";
  const auto* ck = &ctx.prompted().result.checkpoint;
  const auto bytes = protonet::serialize(*ck);
  if (slurp(path) != std::string(bytes.begin(), bytes.end())) problems.push_back("saved bytes differ");
  const auto back = protonet::load_checkpoint(path);
  if (protonet::serialize(back) != bytes) problems.push_back("reload/serialize differs");
  for (const auto& [name, t] : ck->params) {
    const auto& u = back.params.at(name);
    if (t.shape() != u.shape() || std::memcmp(t.data().data(), u.data().data(), t.size() * sizeof(float)) != 0) {
      problems.push_back("param " + name + " differs");
    }
  }

  // two full CLI pipelines with the same seed, compared file by file
  const fs::path dir = ctx.work() / "determinism";
  const fs::path saved = ctx.work() / "determinism_first";
  fs::remove_all(dir);
  fs::remove_all(saved);
  auto pipeline = [&] {
    fs::create_directories(dir);
    std::ofstream(dir / "desk.ini") << "[run]\nseed = 4\n[train]\nsteps = 40\nwarmup = 10\n[data]\nsynth_count = 50\n"
                                       "[sample]\nshots = 5\ncount = 12\n";
    const std::string ini = (dir / "desk.ini").string();
    auto p = [&](const char* f) { return (dir / f).string(); };
    const std::vector<std::vector<std::string>> commands{
        {"make-synth", "--config", ini, "--out", p("train.csv")},
        {"make-synth", "--config", ini, "--seed", "5", "--with-square", "--out", p("test.csv")},
        {"train", "--config", ini, "--data", p("train.csv"), "--out", p("run")},
        {"sample", "--config", ini, "--checkpoint", p("run/final.bin"), "--shots-csv", p("test.csv"),
         "--domain", "trend", "--out", p("gen.csv")},
        {"eval", "--config", ini, "--real", p("test.csv"), "--domain", "trend", "--checkpoint",
         p("run/final.bin"), "--synth", p("gen.csv"), "--out", p("eval.csv")}};
    for (auto args : commands) {
      args.insert(args.begin(), "protodiff");
      std::vector<const char*> argv;
      for (const auto& a : args) argv.push_back(a.c_str());
      if (cli::run(static_cast<int>(argv.size()), argv.data()) != 0) {
        problems.push_back("command failed: " + args[1]);
        return;
      }
    }
  };
  log("determinism pipeline, first pass");
  pipeline();
  fs::rename(dir, saved);
  log("determinism pipeline, second pass");
  pipeline();
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(saved)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), saved);
    ++files;
    if (!fs::exists(dir / rel) || slurp(e.path()) != slurp(dir / rel)) {
      problems.push_back("artifact differs: " + rel.string());
    }
  }
  std::string detail = "checkpoint round trip bit-exact (" + std::to_string(bytes.size()) + " bytes); " +
                       std::to_string(files) + " pipeline artifacts compared byte for byte";
  for (const auto& p : problems) detail += "; " + p;
  return {problems.empty() && files >= 8, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"protodiff acceptance suite"};
  std::string work = "acceptance_work";
  std::string only;
  app.add_option("--work", work, "Scratch directory for runs and artifacts");
  app.add_option("--only", only, "Comma-separated criterion numbers to run");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    for (std::string part; std::getline(ss, part, ',');) selected.insert(std::stoi(part));
  }

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"diffusion algebra", diffusion_algebra},
      {"mask semantics", mask_semantics},
      {"frozen prototype bank", frozen_bank},
      {"balanced sampler", balanced_sampler},
      {"metric oracles", metric_oracles},
      {"desk-scale convergence", convergence},
      {"domain-prompt discrimination", prompt_discrimination},
      {"unseen-domain prompting", unseen_domain},
      {"determinism and persistence", determinism},
  };

  fs::create_directories(work);
  Context ctx(work);
  nlohmann::json report = nlohmann::json::array();
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << id << "  " << criteria[i].first
              << ": " << o.detail << "  [" << fmt(secs, 3) << " s]" << std::endl;
    report.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", o.pass},
                      {"detail", o.detail}, {"seconds", secs}});
  }
  std::ofstream(fs::path(work) / "acceptance.json") << report.dump(2) << '\n';
  std::cout << (failures ? std::to_string(failures) + " criterion(s) failed" : "all criteria passed") << std::endl;
  return failures ? 1 : 0;
}
