#include "ulast/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <set>

#include "ulast/error.hpp"

namespace ulast {

namespace {

constexpr char kMagic[4] = {'U', 'L', 'S', 'T'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  using U = std::make_unsigned_t<std::conditional_t<std::is_same_v<T, float>, std::int32_t, T>>;
  U u;
  std::memcpy(&u, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  template <class T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > b_.size()) throw FormatError(std::string("truncated checkpoint reading ") + what, pos_);
    std::uint64_t u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    T v;
    if constexpr (std::is_same_v<T, float>) {
      const auto w = static_cast<std::uint32_t>(u);
      std::memcpy(&v, &w, sizeof(v));
    } else {
      v = static_cast<T>(u);
    }
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    if (pos_ + n > b_.size()) throw FormatError(std::string("truncated checkpoint reading ") + what, pos_);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet& params) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.items()) {
    if (p.name.size() > 0xffff) throw ContractError("checkpoint: parameter name too long");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    if (p.tensor.rank() > 0xff) throw ContractError("checkpoint: rank too large");
    put<std::uint8_t>(out, static_cast<std::uint8_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : p.tensor.data) put<float>(out, static_cast<float>(v));
  }
  return out;
}

std::vector<CheckpointBlob> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.bytes(4, "magic") != std::string(kMagic, 4)) throw FormatError("bad checkpoint magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const auto n = r.get<std::uint32_t>("parameter count");
  std::vector<CheckpointBlob> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < n; ++i) {
    CheckpointBlob b;
    const std::size_t at = r.pos();
    b.offset = at;
    const auto len = r.get<std::uint16_t>("name length");
    b.name = r.bytes(len, "name");
    if (!seen.insert(b.name).second) throw FormatError("duplicate parameter '" + b.name + "'", at);
    const auto rank = r.get<std::uint8_t>("rank");
    std::size_t count = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      b.shape.push_back(r.get<std::uint32_t>("dimension"));
      count *= b.shape.back();
    }
    if (count > bytes.size()) throw FormatError("implausible size for '" + b.name + "'", r.pos());
    b.values.reserve(count);
    for (std::size_t k = 0; k < count; ++k) b.values.push_back(r.get<float>("values"));
    out.push_back(std::move(b));
  }
  if (!r.done()) throw FormatError("trailing bytes after last parameter", r.pos());
  return out;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const CheckpointMeta& meta) {
  const auto bytes = encode_checkpoint(model.params());
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed for " + path.string());
  }
  nlohmann::json side;
  side["step"] = meta.step;
  side["config"] = meta.config_json.empty() ? nlohmann::json(nullptr) : nlohmann::json::parse(meta.config_json);
  std::ofstream js(path.string() + ".json");
  if (!js) throw std::runtime_error("cannot write " + path.string() + ".json");
  js << side.dump(2) << '\n';
}

CheckpointMeta load_checkpoint(Model& model, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto blobs = decode_checkpoint(bytes);
  auto& params = model.params();
  for (const auto& b : blobs) {
    const Parameter* p = params.find(b.name);
    if (!p) throw FormatError("unknown parameter '" + b.name + "'", b.offset);
    if (p->tensor.shape != b.shape)
      throw FormatError("shape mismatch for '" + b.name + "': file " + shape_str(b.shape) + ", model " +
                            shape_str(p->tensor.shape),
                        b.offset);
  }
  if (blobs.size() != params.size())
    throw FormatError("checkpoint has " + std::to_string(blobs.size()) + " parameters, model has " +
                          std::to_string(params.size()),
                      8);
  for (const auto& b : blobs) {
    auto& t = params.find(b.name)->tensor;
    for (std::size_t i = 0; i < b.values.size(); ++i) t.data[i] = static_cast<double>(b.values[i]);
  }
  CheckpointMeta meta;
  std::ifstream js(path.string() + ".json");
  if (js) {
    try {
      const auto side = nlohmann::json::parse(js);
      meta.step = side.value("step", std::uint64_t{0});
      if (side.contains("config") && !side["config"].is_null()) meta.config_json = side["config"].dump();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad checkpoint sidecar: ") + e.what(), 0);
    }
  }
  return meta;
}

}  // namespace ulast
