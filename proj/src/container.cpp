#include "bnnlab/container.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <sstream>

#include "bnnlab/error.hpp"
#include "bnnlab/model.hpp"

namespace bnnlab {

namespace {

constexpr char kMagic[4] = {'B', 'N', 'N', 'L'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001B3ULL;
  }
  return h;
}

template <class T>
void put(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t limit, const std::string& source)
      : bytes_(bytes), limit_(limit), source_(source) {}

  template <class T>
  T get(const char* what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U), what);
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (n > limit_ - pos_) {
      throw FormatError(source_ + ": truncated at offset " + std::to_string(pos_) + " while reading " + what);
    }
  }

  const std::string& bytes_;
  std::size_t limit_;
  const std::string& source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_container(const Container& c) {
  std::string out(kMagic, 4);
  put(out, kContainerVersion);
  const std::string header = c.header.dump();
  put(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  put(out, static_cast<std::uint64_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    put(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put(out, static_cast<std::uint32_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape()) put(out, static_cast<std::uint64_t>(d));
    for (double v : t.tensor.data()) put(out, v);
  }
  put(out, fnv1a(out.data(), out.size()));
  return out;
}

Container decode_container(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 4 || bytes.compare(0, 4, kMagic, 4) != 0) {
    throw FormatError(source + ": not a BNNL container (bad magic)");
  }
  if (bytes.size() < 16) throw FormatError(source + ": truncated (file too short)");
  const std::size_t body = bytes.size() - 8;
  Reader r(bytes, bytes.size(), source);
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion) {
    throw FormatError(source + ": unsupported format version " + std::to_string(version) + " (expected " +
                      std::to_string(kContainerVersion) + ")");
  }
  Reader checked(bytes, body, source);
  checked.take(8, "preamble");
  Container c;
  const auto header_len = checked.get<std::uint64_t>("header length");
  const std::string header = checked.take(header_len, "header");
  try {
    c.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": corrupt header: " + e.what());
  }
  const auto count = checked.get<std::uint64_t>("tensor count");
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor t;
    const auto name_len = checked.get<std::uint32_t>("tensor name length");
    t.name = checked.take(name_len, "tensor name");
    const auto rank = checked.get<std::uint32_t>("tensor rank");
    if (rank > 8) throw FormatError(source + ": implausible rank for tensor '" + t.name + "'");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(checked.get<std::uint64_t>("tensor extent"));
      numel *= shape.back();
    }
    if (numel > (body - checked.pos()) / 8) {
      throw FormatError(source + ": truncated at offset " + std::to_string(checked.pos()) +
                        " in data of tensor '" + t.name + "'");
    }
    std::vector<double> data(numel);
    for (auto& v : data) v = checked.get<double>("tensor data");
    t.tensor = Tensor(std::move(shape), std::move(data));
    c.tensors.push_back(std::move(t));
  }
  if (checked.pos() != body) {
    throw FormatError(source + ": " + std::to_string(body - checked.pos()) + " unexpected trailing bytes");
  }
  Reader tail(bytes, bytes.size(), source);
  tail.take(body, "body");
  if (tail.get<std::uint64_t>("checksum") != fnv1a(bytes.data(), body)) {
    throw FormatError(source + ": checksum mismatch (corrupt file)");
  }
  return c;
}

void write_container(const std::string& path, const Container& c) {
  const std::string bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path + "' failed");
}

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_container(ss.str(), path);
}

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const Model& model, const std::string& path) {
  Container c;
  c.header = {{"kind", "model"}, {"spec", to_json(model.spec())}, {"metadata", model.metadata()}};
  for (const auto& p : model.parameters()) {
    if (p.bayesian()) {
      c.tensors.push_back({p.name + ".mu", p.mu});
      c.tensors.push_back({p.name + ".rho", *p.rho});
    } else {
      c.tensors.push_back({p.name, p.mu});
    }
  }
  for (const auto& b : model.buffers()) c.tensors.push_back({b.name, b.value});
  write_container(path, c);
}

Model load_checkpoint(const std::string& path) {
  Container c = read_container(path);
  if (!c.header.is_object() || c.header.value("kind", "") != "model" || !c.header.contains("spec")) {
    throw FormatError(path + ": container does not hold a model");
  }
  Model model = build_model(model_spec_from_json(c.header.at("spec")), 0);
  if (c.header.contains("metadata")) model.metadata() = c.header.at("metadata");
  std::map<std::string, Tensor> by_name;
  for (auto& t : c.tensors) {
    if (!by_name.emplace(t.name, std::move(t.tensor)).second) {
      throw FormatError(path + ": duplicate tensor '" + t.name + "'");
    }
  }
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(path + ": missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw FormatError(path + ": tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                        ", expected " + shape_str(shape));
    }
    Tensor t = std::move(it->second);
    by_name.erase(it);
    return t;
  };
  for (auto& p : model.parameters()) {
    if (p.bayesian()) {
      p.mu = take(p.name + ".mu", p.mu.shape());
      p.rho = take(p.name + ".rho", p.rho->shape());
    } else {
      p.mu = take(p.name, p.mu.shape());
    }
  }
  for (auto& b : model.buffers()) b.value = take(b.name, b.value.shape());
  if (!by_name.empty()) throw FormatError(path + ": unexpected tensor '" + by_name.begin()->first + "'");
  return model;
}

}  // namespace bnnlab
