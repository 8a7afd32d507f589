#include "protodiff/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace protodiff::dataio {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::runtime_error csv_error(const std::filesystem::path& path, std::size_t line,
                             const std::string& what) {
  return std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + what);
}

float parse_value(std::string_view field, const std::filesystem::path& path, std::size_t line) {
  float v = 0;
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw csv_error(path, line, "malformed number '" + std::string(field) + "'");
  }
  if (!std::isfinite(v)) throw csv_error(path, line, "non-finite value '" + std::string(field) + "'");
  return v;
}

long parse_int(std::string_view field, const std::filesystem::path& path, std::size_t line) {
  long v = 0;
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw csv_error(path, line, "malformed integer '" + std::string(field) + "'");
  }
  return v;
}

Domain& domain_slot(DomainCorpus& corpus, const std::string& name) {
  const int idx = corpus.find(name);
  if (idx >= 0) return corpus.domains[static_cast<std::size_t>(idx)];
  corpus.domains.push_back(Domain{name, {}});
  return corpus.domains.back();
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.precision(9);
  return out;
}

}  // namespace

std::size_t DomainCorpus::total_windows() const {
  std::size_t n = 0;
  for (const auto& d : domains) n += d.windows.size();
  return n;
}

int DomainCorpus::find(const std::string& name) const {
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

const Domain& DomainCorpus::at(const std::string& name) const {
  const int idx = find(name);
  if (idx < 0) throw std::out_of_range("corpus has no domain '" + name + "'");
  return domains[static_cast<std::size_t>(idx)];
}

void DomainCorpus::validate() const {
  if (length == 0) throw std::invalid_argument("corpus: window length must be positive");
  if (domains.empty()) throw std::invalid_argument("corpus: no domains");
  for (const auto& d : domains) {
    if (d.windows.empty()) throw std::invalid_argument("corpus: domain '" + d.name + "' is empty");
    for (const auto& w : d.windows) {
      if (w.size() != length) {
        throw std::invalid_argument("corpus: domain '" + d.name + "' has a window of length " +
                                    std::to_string(w.size()) + ", expected " +
                                    std::to_string(length));
      }
    }
  }
}

std::vector<Window> slice(const RawSeries& raw, std::size_t length) {
  if (length == 0) throw std::invalid_argument("slice: window length must be positive");
  for (float v : raw.values) {
    if (std::isnan(v)) throw std::invalid_argument("slice: series '" + raw.source + "' has NaN");
  }
  std::vector<Window> out;
  const std::size_t n = raw.values.size() / length;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto first = raw.values.begin() + static_cast<std::ptrdiff_t>(i * length);
    out.emplace_back(first, first + static_cast<std::ptrdiff_t>(length));
  }
  return out;
}

// ---------------------------------------------------------------------------

NormMode parse_norm_mode(const std::string& name) {
  if (name == "minmax") return NormMode::minmax;
  if (name == "zscore") return NormMode::zscore;
  if (name == "none") return NormMode::none;
  throw std::invalid_argument("unknown normalization '" + name + "' (minmax|zscore|none)");
}

std::string to_string(NormMode mode) {
  switch (mode) {
    case NormMode::minmax:
      return "minmax";
    case NormMode::zscore:
      return "zscore";
    case NormMode::none:
      return "none";
  }
  return "?";
}

float NormStats::apply(float v) const {
  switch (mode) {
    case NormMode::minmax:
      return static_cast<float>(2.0 * (v - lo) / (hi - lo) - 1.0);
    case NormMode::zscore:
      return static_cast<float>((v - lo) / hi);
    case NormMode::none:
      return v;
  }
  return v;
}

float NormStats::invert(float v) const {
  switch (mode) {
    case NormMode::minmax:
      return static_cast<float>((v + 1.0) * 0.5 * (hi - lo) + lo);
    case NormMode::zscore:
      return static_cast<float>(v * hi + lo);
    case NormMode::none:
      return v;
  }
  return v;
}

NormStats fit_norm(const std::vector<Window>& windows, NormMode mode) {
  NormStats s;
  s.mode = mode;
  if (mode == NormMode::none) return s;
  std::size_t count = 0;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, total = 0, total_sq = 0;
  for (const auto& w : windows) {
    for (float v : w) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
      total += v;
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("normalize: no values");
  if (mode == NormMode::minmax) {
    if (!(hi > lo)) {
      throw std::invalid_argument(
          "normalize: constant domain cannot be min-max scaled; use zscore mode");
    }
    s.lo = lo;
    s.hi = hi;
    return s;
  }
  const double mu = total / static_cast<double>(count);
  for (const auto& w : windows) {
    for (float v : w) total_sq += (v - mu) * (v - mu);
  }
  const double sd = std::sqrt(total_sq / static_cast<double>(count));
  s.lo = mu;
  s.hi = sd > 0 ? sd : 1.0;
  return s;
}

std::vector<Window> apply_norm(const std::vector<Window>& windows, const NormStats& stats) {
  std::vector<Window> out = windows;
  for (auto& w : out) {
    for (auto& v : w) v = stats.apply(v);
  }
  return out;
}

std::vector<Window> invert_norm(const std::vector<Window>& windows, const NormStats& stats) {
  std::vector<Window> out = windows;
  for (auto& w : out) {
    for (auto& v : w) v = stats.invert(v);
  }
  return out;
}

Normalized normalize(const std::vector<Window>& windows, NormMode mode) {
  Normalized n;
  n.stats = fit_norm(windows, mode);
  n.windows = apply_norm(windows, n.stats);
  return n;
}

NormTable normalize_corpus(DomainCorpus& corpus, NormMode mode) {
  NormTable table;
  for (auto& d : corpus.domains) {
    auto n = normalize(d.windows, mode);
    d.windows = std::move(n.windows);
    table[d.name] = n.stats;
  }
  return table;
}

void to_json(nlohmann::json& j, const NormStats& s) {
  j = nlohmann::json{{"mode", to_string(s.mode)}, {"lo", s.lo}, {"hi", s.hi}};
}

void from_json(const nlohmann::json& j, NormStats& s) {
  s.mode = parse_norm_mode(j.at("mode").get<std::string>());
  s.lo = j.at("lo").get<double>();
  s.hi = j.at("hi").get<double>();
}

// ---------------------------------------------------------------------------

SynthKind parse_synth_kind(const std::string& name) {
  if (name == "sine") return SynthKind::sine;
  if (name == "trend") return SynthKind::trend;
  if (name == "ar1") return SynthKind::ar1;
  if (name == "square") return SynthKind::square;
  throw std::invalid_argument("unknown synthetic domain kind '" + name +
                              "' (sine|trend|ar1|square)");
}

std::string to_string(SynthKind kind) {
  switch (kind) {
    case SynthKind::sine:
      return "sine";
    case SynthKind::trend:
      return "trend";
    case SynthKind::ar1:
      return "ar1";
    case SynthKind::square:
      return "square";
  }
  return "?";
}

SynthDomainSpec preset_domain(SynthKind kind, std::size_t count) {
  SynthDomainSpec d;
  d.name = to_string(kind);
  d.kind = kind;
  d.count = count;
  switch (kind) {
    case SynthKind::sine:
      // 1.5 to 2.5 full cycles per window, smooth and strictly periodic.
      d.p0_lo = 1.5, d.p0_hi = 2.5, d.p1_lo = 0.6, d.p1_hi = 1.0, d.noise = 0.05;
      break;
    case SynthKind::trend:
      d.p0_lo = -2.0, d.p0_hi = 2.0, d.p1_lo = -0.5, d.p1_hi = 0.5, d.noise = 0.15;
      break;
    case SynthKind::ar1:
      d.p0_lo = 0.8, d.p1_lo = 0.5, d.noise = 0.0;
      break;
    case SynthKind::square:
      d.p0_lo = 1.0, d.p0_hi = 2.0, d.p1_lo = 0.6, d.p1_hi = 1.0, d.noise = 0.05;
      break;
  }
  return d;
}

SynthSpec desk_spec(std::size_t length, std::size_t count, bool with_square) {
  SynthSpec spec;
  spec.length = length;
  spec.domains = {preset_domain(SynthKind::sine, count), preset_domain(SynthKind::trend, count),
                  preset_domain(SynthKind::ar1, count)};
  if (with_square) spec.domains.push_back(preset_domain(SynthKind::square, count));
  return spec;
}

DomainCorpus synth_corpus(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.length == 0) throw std::invalid_argument("synth_corpus: length must be positive");
  DomainCorpus corpus;
  corpus.length = spec.length;
  const double len = static_cast<double>(spec.length);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t di = 0; di < spec.domains.size(); ++di) {
    const auto& ds = spec.domains[di];
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(di), 0x5eedu};
    std::mt19937_64 rng(seq);
    auto uniform = [&rng](double lo, double hi) {
      return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    std::normal_distribution<double> gauss(0.0, 1.0);
    Domain dom{ds.name, {}};
    for (std::size_t w = 0; w < ds.count; ++w) {
      Window win(spec.length);
      switch (ds.kind) {
        case SynthKind::sine:
        case SynthKind::square: {
          const double cycles = uniform(ds.p0_lo, std::max(ds.p0_lo, ds.p0_hi));
          const double amp = uniform(ds.p1_lo, std::max(ds.p1_lo, ds.p1_hi));
          const double phase = uniform(0.0, two_pi);
          for (std::size_t t = 0; t < spec.length; ++t) {
            const double s = std::sin(two_pi * cycles * static_cast<double>(t) / len + phase);
            const double base = ds.kind == SynthKind::sine ? s : (s >= 0 ? 1.0 : -1.0);
            win[t] = static_cast<float>(amp * base + ds.noise * gauss(rng));
          }
          break;
        }
        case SynthKind::trend: {
          const double slope = uniform(ds.p0_lo, std::max(ds.p0_lo, ds.p0_hi));
          const double intercept = uniform(ds.p1_lo, std::max(ds.p1_lo, ds.p1_hi));
          for (std::size_t t = 0; t < spec.length; ++t) {
            win[t] = static_cast<float>(intercept + slope * static_cast<double>(t) / len +
                                        ds.noise * gauss(rng));
          }
          break;
        }
        case SynthKind::ar1: {
          const double phi = ds.p0_lo, sd = ds.p1_lo;
          if (!(std::abs(phi) < 1.0)) {
            throw std::invalid_argument("synth_corpus: ar1 coefficient must satisfy |phi| < 1");
          }
          // Start from the stationary distribution.
          double x = gauss(rng) * sd / std::sqrt(1.0 - phi * phi);
          for (std::size_t t = 0; t < spec.length; ++t) {
            if (t > 0) x = phi * x + sd * gauss(rng);
            win[t] = static_cast<float>(x + ds.noise * gauss(rng));
          }
          break;
        }
      }
      dom.windows.push_back(std::move(win));
    }
    corpus.domains.push_back(std::move(dom));
  }
  return corpus;
}

// ---------------------------------------------------------------------------

DomainCorpus load_csv(const std::filesystem::path& path, std::size_t length) {
  if (length == 0) throw std::invalid_argument("load_csv: window length must be positive");
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw csv_error(path, 1, "empty file");
  ++lineno;
  const auto header = split(line);
  if (header.empty() || header[0] != "domain") {
    throw csv_error(path, lineno, "header must start with 'domain'");
  }
  DomainCorpus corpus;
  corpus.length = length;
  const bool long_format = header.size() == 4 && header[1] == "series_id" && header[2] == "t" &&
                           header[3] == "value";
  if (!long_format) {
    if (header.size() != length + 1) {
      throw csv_error(path, lineno,
                      "wide layout has " + std::to_string(header.size() - 1) +
                          " value columns, expected window length " + std::to_string(length));
    }
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      const auto fields = split(line);
      if (fields.size() != header.size()) {
        throw csv_error(path, lineno,
                        "expected " + std::to_string(header.size()) + " fields, got " +
                            std::to_string(fields.size()) + " (mixed window lengths?)");
      }
      if (fields[0].empty()) throw csv_error(path, lineno, "empty domain name");
      Window w(length);
      for (std::size_t i = 0; i < length; ++i) w[i] = parse_value(fields[i + 1], path, lineno);
      domain_slot(corpus, std::string(fields[0])).windows.push_back(std::move(w));
    }
    return corpus;
  }

  // Long layout: rows of one series must be contiguous with t = 0, 1, 2, ...
  std::string cur_domain, cur_series;
  RawSeries cur;
  bool open = false;
  auto flush = [&]() {
    if (!open) return;
    auto& slot = domain_slot(corpus, cur_domain).windows;
    for (auto& w : slice(cur, length)) slot.push_back(std::move(w));
    cur.values.clear();
    open = false;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto fields = split(line);
    if (fields.size() != 4) {
      throw csv_error(path, lineno, "expected 4 fields, got " + std::to_string(fields.size()));
    }
    const std::string domain(fields[0]), series(fields[1]);
    if (domain.empty()) throw csv_error(path, lineno, "empty domain name");
    const long t = parse_int(fields[2], path, lineno);
    const float v = parse_value(fields[3], path, lineno);
    if (!open || domain != cur_domain || series != cur_series) {
      flush();
      cur_domain = domain;
      cur_series = series;
      cur.source = domain + "/" + series;
      open = true;
    }
    if (t != static_cast<long>(cur.values.size())) {
      throw csv_error(path, lineno,
                      "series '" + series + "' expected t=" + std::to_string(cur.values.size()) +
                          ", got " + std::to_string(t));
    }
    cur.values.push_back(v);
  }
  flush();
  return corpus;
}

void write_csv(const std::filesystem::path& path, const DomainCorpus& corpus) {
  auto out = open_out(path);
  out << "domain";
  for (std::size_t i = 0; i < corpus.length; ++i) out << ",value_" << i;
  out << '\n';
  for (const auto& d : corpus.domains) {
    for (const auto& w : d.windows) {
      out << d.name;
      for (float v : w) out << ',' << v;
      out << '\n';
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_rows_csv(const std::filesystem::path& path, const std::vector<Window>& rows) {
  auto out = open_out(path);
  const std::size_t len = rows.empty() ? 0 : rows.front().size();
  for (std::size_t i = 0; i < len; ++i) out << (i ? "," : "") << "value_" << i;
  out << '\n';
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<Window> read_rows_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw csv_error(path, 1, "empty file");
  const auto header = split(line);
  const std::size_t skip = (!header.empty() && header[0] == "domain") ? 1 : 0;
  const std::size_t width = header.size() - skip;
  std::vector<Window> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto fields = split(line);
    if (fields.size() != header.size()) {
      throw csv_error(path, lineno,
                      "expected " + std::to_string(header.size()) + " fields, got " +
                          std::to_string(fields.size()));
    }
    Window w(width);
    for (std::size_t i = 0; i < width; ++i) w[i] = parse_value(fields[i + skip], path, lineno);
    rows.push_back(std::move(w));
  }
  return rows;
}

nlohmann::json manifest(const DomainCorpus& corpus, const NormTable& stats) {
  nlohmann::json j;
  j["length"] = corpus.length;
  j["domains"] = nlohmann::json::array();
  for (const auto& d : corpus.domains) {
    nlohmann::json e{{"name", d.name}, {"count", d.windows.size()}};
    if (auto it = stats.find(d.name); it != stats.end()) e["norm"] = it->second;
    j["domains"].push_back(std::move(e));
  }
  return j;
}

}  // namespace protodiff::dataio
