#include "p2w/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace p2w {
namespace {

static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

constexpr char kMagic[4] = {'P', '2', 'W', 'I'};
constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  template <class T>
  T get(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void read(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }
  std::string str(const char* what) {
    const auto n = get<std::uint32_t>(what);
    std::string s(n, '\0');
    read(s.data(), n, what);
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw SerializeError(SerializeCode::truncated,
                           std::string("model file truncated while reading ") + what);
    }
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::string geometry_text(const Model& m) {
  const Geometry g = m.stem_geometry();
  return "stem_rf=" + std::to_string(g.rf) + "\nstem_stride=" + std::to_string(g.stride) + "\n";
}

}  // namespace

std::vector<std::uint8_t> serialize(Model& model) {
  Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kFormatVersion);
  const std::string desc = model.spec().to_text() + geometry_text(model);
  w.put<std::uint64_t>(desc.size());
  w.bytes(desc.data(), desc.size());

  const auto params = model.params();
  const auto state = model.state();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size() + state.size()));
  for (const auto& p : params) {
    const Shape s = p.value->shape();
    w.str(p.name);
    w.put<std::uint8_t>(kDtypeF64);
    w.put<std::uint8_t>(4);
    for (const std::uint64_t e : {s.n, s.c, s.h, s.w}) w.put<std::uint64_t>(e);
    w.bytes(p.value->raw(), p.value->size() * sizeof(Real));
  }
  for (const auto& st : state) {
    w.str(st.name);
    w.put<std::uint8_t>(kDtypeF64);
    w.put<std::uint8_t>(1);
    w.put<std::uint64_t>(st.values->size());
    w.bytes(st.values->data(), st.values->size() * sizeof(Real));
  }
  return w.take();
}

Model deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw SerializeError(SerializeCode::bad_magic, "not a model file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kFormatVersion) {
    throw SerializeError(SerializeCode::unsupported_version,
                         "unsupported model file version " + std::to_string(version));
  }
  const auto desc_len = r.get<std::uint64_t>("descriptor length");
  if (desc_len > bytes.size()) {
    throw SerializeError(SerializeCode::truncated, "model file truncated: descriptor length exceeds file");
  }
  std::string desc(desc_len, '\0');
  r.read(desc.data(), desc_len, "descriptor");

  Model model = [&] {
    try {
      return Model::build(ModelSpec::from_text(desc));
    } catch (const ShapeError& e) {
      throw SerializeError(SerializeCode::bad_record, std::string("bad model descriptor: ") + e.what());
    }
  }();
  if (desc.find(geometry_text(model)) == std::string::npos) {
    throw SerializeError(SerializeCode::bad_record, "stored geometry disagrees with descriptor");
  }

  std::unordered_map<std::string, std::span<Real>> slots;
  for (auto& p : model.params()) slots.emplace(p.name, p.value->data());
  for (auto& s : model.state()) slots.emplace(s.name, std::span<Real>(*s.values));

  const auto count = r.get<std::uint32_t>("record count");
  if (count != slots.size()) {
    throw SerializeError(SerializeCode::bad_record,
                         "record count " + std::to_string(count) + " does not match model (" +
                             std::to_string(slots.size()) + ")");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str("record name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    const auto rank = r.get<std::uint8_t>("rank");
    if (dtype != kDtypeF64) throw SerializeError(SerializeCode::bad_record, "record " + name + ": unknown dtype");
    if (rank == 0 || rank > 4) throw SerializeError(SerializeCode::bad_record, "record " + name + ": bad rank");
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) n *= r.get<std::uint64_t>("extent");
    auto it = slots.find(name);
    if (it == slots.end()) throw SerializeError(SerializeCode::bad_record, "unknown record " + name);
    if (it->second.size() != n) {
      throw SerializeError(SerializeCode::bad_record, "record " + name + ": size mismatch");
    }
    r.read(it->second.data(), n * sizeof(Real), "record values");
    slots.erase(it);
  }
  if (!r.done()) throw SerializeError(SerializeCode::bad_record, "trailing bytes after last record");
  return model;
}

void save_model(Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) data_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) data_error("write failed: " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) data_error("cannot open model file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace p2w
