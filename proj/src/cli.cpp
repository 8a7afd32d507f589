#include "protodiff/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <boost/algorithm/string/trim.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "protodiff/dataio.hpp"
#include "protodiff/metrics.hpp"
#include "protodiff/protonet/checkpoint.hpp"
#include "protodiff/protonet/denoiser.hpp"
#include "protodiff/sampler.hpp"
#include "protodiff/seeding.hpp"

namespace protodiff::cli {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>> kKnownKeys = {
    {"run", {"seed"}},
    {"model",
     {"length", "prototypes", "width", "base_channels", "channel_mult", "heads", "pam_hidden",
      "pam_kernel", "ff_mult", "mode", "bias", "auto_pad"}},
    {"schedule", {"kind", "steps", "beta_start", "beta_end"}},
    {"train", {"steps", "batch", "lr", "warmup", "p_drop", "checkpoint_every"}},
    {"data", {"norm", "synth_count", "synth_square"}},
    {"sample", {"shots", "count", "chunk", "variant"}},
    {"eval", {"bins", "bandwidth"}},
};

template <typename U>
U parse_number(const std::string& key, const std::string& raw) {
  const std::string text = boost::algorithm::trim_copy(raw);
  U v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end || text.empty()) {
    throw ConfigError(key + ": cannot parse '" + raw + "' as a number");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + text + "'");
}

std::string echo_path(const fs::path& p) { return p.lexically_normal().string(); }

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

fs::path sidecar(const fs::path& p, const std::string& suffix) {
  return fs::path(p.string() + suffix);
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// Normalization stats for a domain: the checkpoint's when it has them,
// otherwise fitted on the given windows (unseen domain).
std::pair<dataio::NormStats, bool> domain_stats(const protonet::Checkpoint& ck,
                                                const std::string& domain,
                                                const std::vector<dataio::Window>& windows,
                                                const std::string& mode) {
  if (auto it = ck.norms.find(domain); it != ck.norms.end()) return {it->second, true};
  return {dataio::fit_norm(windows, dataio::parse_norm_mode(mode)), false};
}

const dataio::Domain& pick_domain(const dataio::DomainCorpus& corpus,
                                  const std::optional<std::string>& name, const fs::path& src) {
  if (name) return corpus.at(*name);
  if (corpus.domains.size() == 1) return corpus.domains.front();
  throw std::invalid_argument(src.string() + " holds " + std::to_string(corpus.domains.size()) +
                              " domains; choose one with --domain");
}

}  // namespace

trainer::TrainConfig RunConfig::train_config() const {
  trainer::TrainConfig t;
  t.steps = steps;
  t.batch = batch;
  t.lr = lr;
  t.warmup = std::min(warmup, steps);
  t.p_drop = p_drop;
  t.seed = seed;
  t.checkpoint_every = checkpoint_every;
  t.schedule = schedule;
  t.model = model;
  return t;
}

void RunConfig::validate() const {
  static const std::set<std::size_t> lengths{24, 96, 168, 336};
  if (!lengths.count(model.length)) {
    throw ConfigError("length must be one of 24, 96, 168, 336 (got " +
                      std::to_string(model.length) + ")");
  }
  model.validate();
  (void)schedule.build();
  (void)dataio::parse_norm_mode(norm);
  (void)sampler::parse_variant(variant);
  if (shots == 0) throw ConfigError("shots must be >= 1");
  if (count == 0) throw ConfigError("count must be >= 1");
  if (chunk == 0) throw ConfigError("chunk must be >= 1");
  if (bins < 2) throw ConfigError("bins must be >= 2");
  if (bandwidth && !(*bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
  if (synth_count == 0) throw ConfigError("synth_count must be >= 1");
  train_config().validate();
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"model", c.model},
                     {"schedule", c.schedule},
                     {"train",
                      {{"steps", c.steps},
                       {"batch", c.batch},
                       {"lr", c.lr},
                       {"warmup", c.warmup},
                       {"p_drop", c.p_drop},
                       {"checkpoint_every", c.checkpoint_every}}},
                     {"data",
                      {{"norm", c.norm},
                       {"synth_count", c.synth_count},
                       {"synth_square", c.synth_square}}},
                     {"sample",
                      {{"shots", c.shots},
                       {"count", c.count},
                       {"chunk", c.chunk},
                       {"variant", c.variant}}},
                     {"eval", {{"bins", c.bins}}}};
  j["eval"]["bandwidth"] = c.bandwidth ? nlohmann::json(*c.bandwidth) : nlohmann::json("median");
}

void set_diffusion_steps(RunConfig& c, int steps, bool keep_betas) {
  if (keep_betas) {
    c.schedule.steps = steps;
  } else {
    const auto kind = c.schedule.kind;
    c.schedule = schedule::ScheduleConfig::scaled(steps);
    c.schedule.kind = kind;
  }
}

RunConfig parse_config(const std::string& text, RunConfig c) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    auto known = kKnownKeys.find(section);
    if (body.empty()) {
      throw ConfigError("config: key '" + section + "' outside a section");
    }
    if (known == kKnownKeys.end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (!known->second.count(key)) {
        throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
      }
    }
  }
  auto get = [&](const std::string& sec, const std::string& key) -> std::optional<std::string> {
    auto v = tree.get_optional<std::string>(pt::ptree::path_type(sec + "/" + key, '/'));
    if (v) return *v;
    return std::nullopt;
  };
  auto set_size = [&](const std::string& sec, const std::string& key, std::size_t& dst) {
    if (auto v = get(sec, key)) dst = parse_number<std::size_t>("[" + sec + "] " + key, *v);
  };
  auto set_double = [&](const std::string& sec, const std::string& key, double& dst) {
    if (auto v = get(sec, key)) dst = parse_number<double>("[" + sec + "] " + key, *v);
  };

  try {
    if (auto v = get("run", "seed")) c.seed = parse_number<std::uint64_t>("[run] seed", *v);

    set_size("model", "length", c.model.length);
    set_size("model", "prototypes", c.model.prototypes);
    set_size("model", "width", c.model.width);
    set_size("model", "base_channels", c.model.base_channels);
    set_size("model", "heads", c.model.heads);
    set_size("model", "pam_hidden", c.model.pam_hidden);
    set_size("model", "pam_kernel", c.model.pam_kernel);
    set_size("model", "ff_mult", c.model.ff_mult);
    if (auto v = get("model", "channel_mult")) {
      std::istringstream in(*v);
      std::string part;
      std::size_t i = 0;
      while (std::getline(in, part, ',')) {
        if (i >= protonet::kLevels) throw ConfigError("[model] channel_mult: too many entries");
        c.model.channel_mult[i++] = parse_number<std::size_t>("[model] channel_mult", part);
      }
      if (i != protonet::kLevels) {
        throw ConfigError("[model] channel_mult: need " + std::to_string(protonet::kLevels) +
                          " entries");
      }
    }
    if (auto v = get("model", "mode")) c.model.mode = protonet::parse_condition_mode(*v);
    if (auto v = get("model", "bias")) c.model.bias = protonet::parse_bias_mode(*v);
    if (auto v = get("model", "auto_pad")) c.model.auto_pad = parse_bool("[model] auto_pad", *v);

    if (auto v = get("schedule", "kind")) c.schedule.kind = schedule::parse_kind(*v);
    const bool explicit_betas = get("schedule", "beta_start") || get("schedule", "beta_end");
    if (auto v = get("schedule", "steps")) {
      set_diffusion_steps(c, parse_number<int>("[schedule] steps", *v), explicit_betas);
    }
    set_double("schedule", "beta_start", c.schedule.beta_start);
    set_double("schedule", "beta_end", c.schedule.beta_end);

    set_size("train", "steps", c.steps);
    set_size("train", "batch", c.batch);
    set_double("train", "lr", c.lr);
    set_size("train", "warmup", c.warmup);
    set_double("train", "p_drop", c.p_drop);
    set_size("train", "checkpoint_every", c.checkpoint_every);

    if (auto v = get("data", "norm")) c.norm = *v;
    set_size("data", "synth_count", c.synth_count);
    if (auto v = get("data", "synth_square")) c.synth_square = parse_bool("[data] synth_square", *v);

    set_size("sample", "shots", c.shots);
    set_size("sample", "count", c.count);
    set_size("sample", "chunk", c.chunk);
    if (auto v = get("sample", "variant")) c.variant = *v;

    set_size("eval", "bins", c.bins);
    if (auto v = get("eval", "bandwidth")) {
      if (*v == "median") {
        c.bandwidth.reset();
      } else {
        c.bandwidth = parse_number<double>("[eval] bandwidth", *v);
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_config(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// -- commands -----------------------------------------------------------------

void cmd_make_synth(const RunConfig& c, const SynthArgs& a) {
  const auto spec = dataio::desk_spec(c.model.length, c.synth_count, c.synth_square);
  const auto corpus = dataio::synth_corpus(spec, c.seed);
  ensure_parent(a.out);
  dataio::write_csv(a.out, corpus);
  auto m = dataio::manifest(corpus, {});
  m["seed"] = c.seed;
  m["config"] = c;
  write_json(sidecar(a.out, ".manifest.json"), m);
  std::cout << "wrote " << corpus.total_windows() << " windows in " << corpus.domains.size()
            << " domains to " << a.out.string() << '\n';
}

void cmd_train(const RunConfig& c, const TrainArgs& a) {
  auto corpus = dataio::load_csv(a.data, c.model.length);
  const auto norms = dataio::normalize_corpus(corpus, dataio::parse_norm_mode(c.norm));
  fs::create_directories(a.out);
  auto m = dataio::manifest(corpus, norms);
  m["data"] = echo_path(a.data);
  write_json(a.out / "manifest.json", m);
  write_json(a.out / "config.json", nlohmann::json(c));

  const auto tc = c.train_config();
  const std::size_t every = std::max<std::size_t>(1, tc.steps / 20);
  double window = 0.0;
  std::size_t in_window = 0;
  auto progress = [&](std::size_t step, double loss) {
    window += loss;
    ++in_window;
    if (step % every == 0 || step == tc.steps) {
      std::cerr << "step " << step << "/" << tc.steps << "  loss " << std::setprecision(5)
                << window / static_cast<double>(in_window) << '\n';
      window = 0.0;
      in_window = 0;
    }
  };
  trainer::train(corpus, tc, norms, a.out, progress);
  std::cout << "checkpoint " << (a.out / "final.bin").string() << '\n';
}

void cmd_sample(const RunConfig& c, const SampleArgs& a) {
  const auto ck = protonet::load_checkpoint(a.checkpoint);
  const protonet::Denoiser<float> den(ck.model, ck.params, ck.bank);
  const auto sched = ck.schedule.build();

  sampler::GenerateOptions opts;
  opts.count = c.count;
  opts.variant = sampler::parse_variant(c.variant);
  opts.seed = c.seed;
  opts.chunk = c.chunk;

  nlohmann::json meta{{"seed", c.seed},
                      {"checkpoint", echo_path(a.checkpoint)},
                      {"checkpoint_hash", protonet::file_hash(a.checkpoint)},
                      {"variant", sampler::to_string(opts.variant)},
                      {"count", c.count},
                      {"chunk", c.chunk},
                      {"config", c}};

  std::optional<dataio::NormStats> stats;
  std::vector<dataio::Window> rows;
  if (a.unconditional) {
    meta["prompt_source"] = "unconditional";
    if (a.domain) {
      if (auto it = ck.norms.find(*a.domain); it != ck.norms.end()) stats = it->second;
    }
    rows = sampler::generate_unconditional(den, sched, opts);
  } else {
    if (!a.shots_csv) throw std::invalid_argument("sample: need --shots-csv (or --no-prompt)");
    const auto corpus = dataio::load_csv(*a.shots_csv, ck.model.length);
    const auto& dom = pick_domain(corpus, a.domain, *a.shots_csv);
    if (dom.windows.size() < c.shots) {
      throw std::invalid_argument("sample: domain '" + dom.name + "' has " +
                                  std::to_string(dom.windows.size()) + " windows, --shots is " +
                                  std::to_string(c.shots));
    }
    auto [st, known] = domain_stats(ck, dom.name, dom.windows, c.norm);
    stats = st;
    std::vector<std::size_t> idx(dom.windows.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto rng = make_rng(c.seed, streams::shots);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(c.shots);
    std::vector<dataio::Window> shots;
    for (auto i : idx) shots.push_back(dom.windows[i]);
    shots = dataio::apply_norm(shots, st);
    const auto prompt = sampler::build_domain_prompt(den, shots, dom.name);
    meta["prompt_source"] = echo_path(*a.shots_csv) + ":" + dom.name;
    meta["shot_indices"] = idx;
    meta["norm"] = st;
    meta["norm_from_checkpoint"] = known;
    rows = sampler::generate(den, sched, prompt, opts);
  }
  if (a.denormalize) {
    if (!stats) {
      throw std::invalid_argument("sample: --denormalize needs a domain with known statistics");
    }
    rows = dataio::invert_norm(rows, *stats);
  }
  meta["units"] = a.denormalize ? "original" : "normalized";
  ensure_parent(a.out);
  dataio::write_rows_csv(a.out, rows);
  write_json(sidecar(a.out, ".meta.json"), meta);
  std::cout << "wrote " << rows.size() << " samples to " << a.out.string() << '\n';
}

void cmd_eval(const RunConfig& c, const EvalArgs& a) {
  const auto synth = dataio::read_rows_csv(a.synth);
  metrics::check_set(synth, "synth");
  const std::size_t len = synth.front().size();

  std::vector<dataio::Window> real;
  if (a.domain) {
    real = dataio::load_csv(a.real, len).at(*a.domain).windows;
  } else {
    real = dataio::read_rows_csv(a.real);
  }
  if (a.checkpoint) {
    if (!a.domain) throw std::invalid_argument("eval: --checkpoint needs --domain");
    const auto ck = protonet::load_checkpoint(*a.checkpoint);
    auto [st, known] = domain_stats(ck, *a.domain, real, c.norm);
    (void)known;
    real = dataio::apply_norm(real, st);
  }
  const auto r = metrics::evaluate(real, synth, c.bins, c.bandwidth);

  std::ostringstream cfg;
  cfg << std::setprecision(9);
  cfg << "n_real=" << real.size() << ";n_synth=" << synth.size();
  const std::string common = cfg.str();
  std::ostringstream bw;
  bw << std::setprecision(9) << r.bandwidth;

  std::cout << std::left << std::setw(8) << "metric" << std::setw(16) << "value" << "config\n";
  std::cout << std::setprecision(6);
  std::cout << std::setw(8) << "mmd" << std::setw(16) << r.mmd << "bandwidth=" << bw.str()
            << (c.bandwidth ? "" : " (median)") << '\n';
  std::cout << std::setw(8) << "kl" << std::setw(16) << r.kl << "bins=" << r.bins << '\n';
  std::cout << std::setw(8) << "mdd" << std::setw(16) << r.mdd << "bins=" << r.bins << '\n';

  if (a.out) {
    ensure_parent(*a.out);
    std::ofstream out(*a.out, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + a.out->string());
    out << std::setprecision(9);
    out << "metric,value,config\n";
    out << "mmd," << r.mmd << ",bandwidth=" << bw.str() << ";" << common << '\n';
    out << "kl," << r.kl << ",bins=" << r.bins << ";" << common << '\n';
    out << "mdd," << r.mdd << ",bins=" << r.bins << ";" << common << '\n';
    if (!out) throw std::runtime_error("write failed: " + a.out->string());
  }
}

void cmd_inspect(const RunConfig& c, const InspectArgs& a) {
  const auto ck = protonet::load_checkpoint(a.checkpoint);
  const protonet::Denoiser<float> den(ck.model, ck.params, ck.bank);
  const auto sched = ck.schedule.build();
  const auto corpus = dataio::load_csv(a.data, ck.model.length);
  const std::size_t np = ck.model.prototypes, len = ck.model.length;
  fs::create_directories(a.out);

  {
    std::ofstream out(a.out / "assignments.csv", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write assignments.csv");
    out << std::setprecision(9) << "domain,index";
    for (std::size_t j = 0; j < np; ++j) out << ",w_" << j;
    out << '\n';
    for (const auto& dom : corpus.domains) {
      const auto st = domain_stats(ck, dom.name, dom.windows, c.norm).first;
      const auto windows = dataio::apply_norm(dom.windows, st);
      constexpr std::size_t chunk = 256;
      for (std::size_t s = 0; s < windows.size(); s += chunk) {
        const std::size_t b = std::min(chunk, windows.size() - s);
        std::vector<float> flat;
        for (std::size_t i = 0; i < b; ++i) flat.insert(flat.end(), windows[s + i].begin(), windows[s + i].end());
        const auto w = den.assign(nd::Tensor<float>({b, len}, std::move(flat)));
        for (std::size_t i = 0; i < b; ++i) {
          out << dom.name << ',' << s + i;
          for (std::size_t j = 0; j < np; ++j) out << ',' << w.data()[i * np + j];
          out << '\n';
        }
      }
    }
    if (!out) throw std::runtime_error("write failed: assignments.csv");
  }

  sampler::GenerateOptions opts;
  opts.count = c.count;
  opts.variant = sampler::parse_variant(c.variant);
  opts.seed = c.seed;
  opts.chunk = c.chunk;
  std::ofstream out(a.out / "onehot.csv", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write onehot.csv");
  out << std::setprecision(9) << "prototype";
  for (std::size_t t = 0; t < len; ++t) out << ",value_" << t;
  out << '\n';
  for (std::size_t j = 0; j < np; ++j) {
    const auto rows = sampler::generate(den, sched, sampler::one_hot_prompt(np, j), opts);
    for (const auto& r : rows) {
      out << j;
      for (float v : r) out << ',' << v;
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error("write failed: onehot.csv");
  write_json(a.out / "inspect.json", nlohmann::json{{"checkpoint", echo_path(a.checkpoint)},
                                                    {"checkpoint_hash", protonet::file_hash(a.checkpoint)},
                                                    {"data", echo_path(a.data)},
                                                    {"seed", c.seed},
                                                    {"config", c}});
  std::cout << "wrote assignments.csv and onehot.csv to " << a.out.string() << '\n';
}

// -- argument parsing ---------------------------------------------------------

namespace {

// Flag values that override the config file. Unset means "keep".
struct Overrides {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> length, prototypes, steps, batch, warmup, shots, count, chunk, bins,
      synth_count, checkpoint_every;
  std::optional<int> diffusion_steps;
  std::optional<double> lr, p_drop, bandwidth;
  std::optional<std::string> variant, norm, bias;
  bool no_pam = false, no_prompt = false, with_square = false;

  RunConfig resolve() const {
    RunConfig c = config ? load_config(*config) : RunConfig{};
    if (seed) c.seed = *seed;
    if (length) c.model.length = *length;
    if (prototypes) c.model.prototypes = *prototypes;
    if (steps) c.steps = *steps;
    if (batch) c.batch = *batch;
    if (warmup) c.warmup = *warmup;
    if (checkpoint_every) c.checkpoint_every = *checkpoint_every;
    if (shots) c.shots = *shots;
    if (count) c.count = *count;
    if (chunk) c.chunk = *chunk;
    if (bins) c.bins = *bins;
    if (synth_count) c.synth_count = *synth_count;
    if (diffusion_steps) set_diffusion_steps(c, *diffusion_steps, false);
    if (lr) c.lr = *lr;
    if (p_drop) c.p_drop = *p_drop;
    if (bandwidth) c.bandwidth = *bandwidth;
    if (variant) c.variant = *variant;
    if (norm) c.norm = *norm;
    if (bias) c.model.bias = protonet::parse_bias_mode(*bias);
    if (no_pam && no_prompt) throw ConfigError("--no-pam and --no-prompt are exclusive");
    if (no_pam) c.model.mode = protonet::ConditionMode::raw_weights;
    if (no_prompt) c.model.mode = protonet::ConditionMode::unconditional;
    if (with_square) c.synth_square = true;
    c.validate();
    return c;
  }
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "INI config file")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Random seed");
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Prototype-conditioned diffusion for multi-domain time series"};
  app.require_subcommand(1);
  Overrides o;

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("make-synth", "Write a synthetic multi-domain corpus CSV");
  add_common(synth, o);
  synth->add_option("--out", synth_args.out, "Output CSV")->required();
  synth->add_option("--length", o.length, "Window length")->check(CLI::IsMember({24, 96, 168, 336}));
  synth->add_option("--count", o.synth_count, "Windows per domain");
  synth->add_flag("--with-square", o.with_square, "Add the square-wave domain");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a denoiser on a corpus CSV");
  add_common(train, o);
  train->add_option("--data", train_args.data, "Corpus CSV")->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_args.out, "Output directory")->required();
  train->add_option("--steps", o.steps, "Optimizer steps");
  train->add_option("--batch", o.batch, "Batch size");
  train->add_option("--lr", o.lr, "Learning rate");
  train->add_option("--warmup", o.warmup, "Warmup steps");
  train->add_option("--length", o.length, "Window length")->check(CLI::IsMember({24, 96, 168, 336}));
  train->add_option("--prototypes,--num-prototypes", o.prototypes, "Prototype count");
  train->add_option("--p-drop", o.p_drop, "Condition drop probability");
  train->add_option("--diffusion-steps", o.diffusion_steps, "Diffusion steps N (betas rescaled)");
  train->add_option("--norm", o.norm, "Normalization (minmax|zscore|none)");
  train->add_option("--bias", o.bias, "Attention bias (additive|gate)");
  train->add_option("--checkpoint-every", o.checkpoint_every, "Intermediate checkpoint period");
  train->add_flag("--no-pam", o.no_pam, "Condition on phi(x) as a single token");
  train->add_flag("--no-prompt", o.no_prompt, "Train the unconditional model only");

  SampleArgs sample_args;
  auto* sample = app.add_subcommand("sample", "Generate windows from a checkpoint");
  add_common(sample, o);
  sample->add_option("--checkpoint", sample_args.checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  sample->add_option("--shots-csv", sample_args.shots_csv, "CSV with prompt windows")
      ->check(CLI::ExistingFile);
  sample->add_option("--domain", sample_args.domain, "Domain to take shots from");
  sample->add_option("--shots", o.shots, "Number of prompt shots K");
  sample->add_option("--count", o.count, "Samples to generate");
  sample->add_option("--variant", o.variant, "Reverse step (ddpm|alg2)")
      ->check(CLI::IsMember({"ddpm", "alg2"}));
  sample->add_option("--chunk", o.chunk, "Chains per network call");
  sample->add_flag("--no-prompt", sample_args.unconditional, "Sample with the unconditional token");
  sample->add_flag("--denormalize", sample_args.denormalize, "Write values in original units");
  sample->add_option("--out", sample_args.out, "Output CSV")->required();

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Compare real and generated windows");
  add_common(eval, o);
  eval->add_option("--real", eval_args.real, "Real windows CSV")->required()->check(CLI::ExistingFile);
  eval->add_option("--synth", eval_args.synth, "Generated windows CSV")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--domain", eval_args.domain, "Restrict real data to one domain");
  eval->add_option("--checkpoint", eval_args.checkpoint, "Normalize real data with its stats")
      ->check(CLI::ExistingFile);
  eval->add_option("--bins", o.bins, "Histogram bins");
  eval->add_option("--bandwidth", o.bandwidth, "RBF bandwidth (default: median heuristic)");
  eval->add_option("--out", eval_args.out, "Report CSV (metric,value,config)");

  InspectArgs inspect_args;
  auto* inspect = app.add_subcommand("inspect", "Assignment matrix and one-hot prototype samples");
  add_common(inspect, o);
  inspect->add_option("--checkpoint", inspect_args.checkpoint, "Checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  inspect->add_option("--data", inspect_args.data, "Corpus CSV")->required()->check(CLI::ExistingFile);
  inspect->add_option("--count", o.count, "Samples per prototype");
  inspect->add_option("--variant", o.variant, "Reverse step (ddpm|alg2)")
      ->check(CLI::IsMember({"ddpm", "alg2"}));
  inspect->add_option("--out", inspect_args.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const RunConfig c = o.resolve();
    if (*synth) cmd_make_synth(c, synth_args);
    if (*train) cmd_train(c, train_args);
    if (*sample) cmd_sample(c, sample_args);
    if (*eval) cmd_eval(c, eval_args);
    if (*inspect) cmd_inspect(c, inspect_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace protodiff::cli
