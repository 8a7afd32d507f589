#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace protodiff::dataio {

using Window = std::vector<float>;

/// Variable-length clean source series.
struct RawSeries {
  std::string source;
  std::vector<float> values;
};

struct Domain {
  std::string name;
  std::vector<Window> windows;
};

/// Windows of one fixed length, grouped by domain.
struct DomainCorpus {
  std::size_t length = 0;
  std::vector<Domain> domains;

  std::size_t total_windows() const;
  /// Index of the named domain, or -1.
  int find(const std::string& name) const;
  const Domain& at(const std::string& name) const;
  /// Throws unless every window has `length` values and every domain is non-empty.
  void validate() const;
};

/// Non-overlapping consecutive windows; the remainder after the last full
/// window is dropped. A series shorter than `length` yields no windows.
std::vector<Window> slice(const RawSeries& raw, std::size_t length);

// -- normalization ------------------------------------------------------------

enum class NormMode { minmax, zscore, none };

NormMode parse_norm_mode(const std::string& name);
std::string to_string(NormMode mode);

/// Affine per-domain scaling. minmax maps [lo, hi] onto [-1, 1]; zscore maps
/// mean/std onto 0/1.
struct NormStats {
  NormMode mode = NormMode::none;
  double lo = 0.0;  // min (minmax) or mean (zscore)
  double hi = 1.0;  // max (minmax) or std (zscore)

  float apply(float v) const;
  float invert(float v) const;
};

NormStats fit_norm(const std::vector<Window>& windows, NormMode mode);
std::vector<Window> apply_norm(const std::vector<Window>& windows, const NormStats& stats);
std::vector<Window> invert_norm(const std::vector<Window>& windows, const NormStats& stats);

struct Normalized {
  std::vector<Window> windows;
  NormStats stats;
};
Normalized normalize(const std::vector<Window>& windows, NormMode mode = NormMode::minmax);

/// Per-domain stats keyed by domain name.
using NormTable = std::map<std::string, NormStats>;

/// Normalizes every domain independently; returns the fitted table.
NormTable normalize_corpus(DomainCorpus& corpus, NormMode mode);

void to_json(nlohmann::json& j, const NormStats& s);
void from_json(const nlohmann::json& j, NormStats& s);

// -- synthetic domains ----------------------------------------------------------

enum class SynthKind { sine, trend, ar1, square };

SynthKind parse_synth_kind(const std::string& name);
std::string to_string(SynthKind kind);

/// Parameter ranges for one generator; unused fields are ignored by a kind.
///   sine:   cycles per window in [p0_lo, p0_hi], amplitude in [p1_lo, p1_hi]
///   trend:  slope over the window in [p0_lo, p0_hi], intercept in [p1_lo, p1_hi]
///   ar1:    coefficient p0_lo, innovation std p1_lo
///   square: cycles per window in [p0_lo, p0_hi], amplitude in [p1_lo, p1_hi]
/// `noise` is the std of additive white noise.
struct SynthDomainSpec {
  std::string name;
  SynthKind kind = SynthKind::sine;
  std::size_t count = 0;
  double p0_lo = 0, p0_hi = 0, p1_lo = 0, p1_hi = 0;
  double noise = 0;
};

struct SynthSpec {
  std::size_t length = 24;
  std::vector<SynthDomainSpec> domains;
};

/// Preset generator for a named kind with the documented desk-scale ranges.
SynthDomainSpec preset_domain(SynthKind kind, std::size_t count);
/// sine / trend / ar1 (and square when `with_square`), `count` windows each.
SynthSpec desk_spec(std::size_t length, std::size_t count, bool with_square = false);

/// Deterministic per seed. Values are in natural units (not normalized).
DomainCorpus synth_corpus(const SynthSpec& spec, std::uint64_t seed);

// -- files --------------------------------------------------------------------

/// Reads either the wide layout `domain,value_0,...,value_{T-1}` (one window
/// per row) or the long layout `domain,series_id,t,value` (series sliced into
/// windows of `length`). Domains keep first-appearance order.
DomainCorpus load_csv(const std::filesystem::path& path, std::size_t length);
/// Writes the wide layout.
void write_csv(const std::filesystem::path& path, const DomainCorpus& corpus);

/// Plain rows of T values with a `value_0,...` header (generated samples).
void write_rows_csv(const std::filesystem::path& path, const std::vector<Window>& rows);
std::vector<Window> read_rows_csv(const std::filesystem::path& path);

/// Domain names, counts, length and (optional) normalization stats.
nlohmann::json manifest(const DomainCorpus& corpus, const NormTable& stats);

}  // namespace protodiff::dataio
