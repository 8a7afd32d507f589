#include "protodiff/protonet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace protodiff::schedule {

void to_json(nlohmann::json& j, const ScheduleConfig& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)},
                     {"steps", s.steps},
                     {"beta_start", s.beta_start},
                     {"beta_end", s.beta_end}};
}

void from_json(const nlohmann::json& j, ScheduleConfig& s) {
  s.kind = parse_kind(j.at("kind").get<std::string>());
  s.steps = j.at("steps").get<int>();
  s.beta_start = j.at("beta_start").get<double>();
  s.beta_end = j.at("beta_end").get<double>();
}

}  // namespace protodiff::schedule

namespace protodiff::protonet {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");
static_assert(sizeof(float) == 4);

constexpr const char* kBankName = "bank.P";

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(U));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  void array(const std::string& name, const nd::Shape& shape, std::span<const float> values) {
    put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    bytes(name.data(), name.size());
    put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put<std::uint64_t>(d);
    bytes(values.data(), values.size() * sizeof(float));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}

  void need(std::size_t n, const char* what) {
    if (buf.size() - pos < n) {
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what +
                            " at byte " + std::to_string(pos));
    }
  }
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, buf.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::vector<float> floats(std::size_t n, const char* what) {
    if (n > (buf.size() - pos) / sizeof(float)) need(n * sizeof(float), what);
    std::vector<float> v(n);
    std::memcpy(v.data(), buf.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
    return v;
  }

  std::span<const std::uint8_t> buf;
  std::size_t pos = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  nlohmann::json header{{"model", ckpt.model},
                        {"schedule", ckpt.schedule},
                        {"norms", ckpt.norms},
                        {"seed", ckpt.seed},
                        {"meta", ckpt.meta}};
  const std::string text = header.dump();

  Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(text.size());
  w.bytes(text.data(), text.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.params.size() + 1));
  w.array(kBankName, {ckpt.bank.count, ckpt.bank.width}, ckpt.bank.rows);
  for (const auto& [name, t] : ckpt.params) w.array(name, t.shape(), t.data());
  return std::move(w.out);
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.str(sizeof(kCheckpointMagic), "magic") !=
      std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = r.get<std::uint64_t>("header length");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str(header_len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.model = header.at("model").get<ModelConfig>();
    ck.schedule = header.at("schedule").get<schedule::ScheduleConfig>();
    ck.norms = header.at("norms").get<dataio::NormTable>();
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.meta = header.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header missing fields: ") + e.what());
  }

  const auto arrays = r.get<std::uint32_t>("array count");
  bool have_bank = false;
  for (std::uint32_t i = 0; i < arrays; ++i) {
    const auto name = r.str(r.get<std::uint32_t>("name length"), "array name");
    const auto rank = r.get<std::uint32_t>("rank");
    nd::Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>("dims");
    auto values = r.floats(nd::numel(shape), name.c_str());
    if (name == kBankName) {
      if (rank != 2) throw CheckpointError("bank array must be rank 2");
      ck.bank.count = shape[0];
      ck.bank.width = shape[1];
      ck.bank.rows = std::move(values);
      have_bank = true;
    } else {
      ck.params.add(name, nd::Tensor<float>(std::move(shape), std::move(values)));
    }
  }
  if (!have_bank) throw CheckpointError("checkpoint has no prototype bank");
  if (r.pos != bytes.size()) {
    throw CheckpointError("trailing bytes after checkpoint payload");
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("short write on " + path.string());
}

namespace {
std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}
}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  try {
    return deserialize(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

std::string file_hash(const std::filesystem::path& path) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << fnv1a64(slurp(path));
  return os.str();
}

}  // namespace protodiff::protonet
