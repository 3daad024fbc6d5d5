#include "mdt/parameters.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace mdt {

static_assert(std::endian::native == std::endian::little,
              "container encoding assumes a little-endian host");

Tensor ParameterStore::add(const std::string& name, Tensor value) {
  for (const auto& e : entries_) {
    if (e.name == name) throw ContractError("duplicate parameter name: " + name);
  }
  for (auto& v : value.data()) v = static_cast<real>(static_cast<float>(v));
  value.set_requires_grad(true);
  entries_.push_back({name, value});
  return value;
}

Tensor ParameterStore::add_weight(const std::string& name, Shape shape, Rng& rng, double sigma) {
  std::vector<real> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<real>(rng.truncated_normal(sigma));
  return add(name, Tensor::from(std::move(shape), std::move(values)));
}

Tensor ParameterStore::add_zeros(const std::string& name, Shape shape) {
  return add(name, Tensor::zeros(std::move(shape)));
}

Tensor ParameterStore::add_ones(const std::string& name, Shape shape) {
  return add(name, Tensor::full(std::move(shape), 1.0f));
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw ContractError("unknown parameter: " + name);
}

Tensor& ParameterStore::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParameterStore&>(*this).get(name));
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

namespace {

template <typename T>
void put(std::vector<char>& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T take(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size()) {
      throw IoError(std::string("container truncated while reading ") + what);
    }
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string take_string(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError("container truncated while reading a name");
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void take_floats(std::vector<real>& out, std::size_t n) {
    if (pos_ + n * sizeof(float) > bytes_.size()) {
      throw IoError("container truncated: payload shorter than its declared shape");
    }
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, bytes_.data() + pos_ + i * sizeof(float), sizeof(float));
      out[i] = static_cast<real>(f);
    }
    pos_ += n * sizeof(float);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<char> encode_container(const char (&magic)[4], const std::vector<NamedTensor>& entries) {
  std::vector<char> out(magic, magic + 4);
  put<std::uint16_t>(out, kContainerVersion);
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw IoError("parameter name too long: " + e.name.substr(0, 32));
    if (e.value.rank() > 0xFF) throw IoError("tensor rank too large for the container");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.value.rank()));
    for (auto d : e.value.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (real v : e.value.data()) put<float>(out, static_cast<float>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_container(const char (&magic)[4], const std::vector<char>& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), magic, 4) != 0) {
    throw IoError(std::string("bad container magic, expected ") + std::string(magic, 4));
  }
  Reader in(bytes);
  in.take<std::uint32_t>("magic");
  const auto version = in.take<std::uint16_t>("version");
  if (version != kContainerVersion) {
    throw IoError("unsupported container version " + std::to_string(version));
  }
  std::vector<NamedTensor> entries;
  while (!in.done()) {
    const auto len = in.take<std::uint16_t>("name length");
    std::string name = in.take_string(len);
    const auto rank = in.take<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.take<std::uint32_t>("dimension");
    std::vector<real> values;
    in.take_floats(values, shape_numel(shape));
    entries.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  return entries;
}

std::vector<char> save_checkpoint(const ParameterStore& store) {
  return encode_container(kCheckpointMagic, store.entries());
}

void load_checkpoint(ParameterStore& store, const std::vector<char>& bytes) {
  auto entries = decode_container(kCheckpointMagic, bytes);
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e.value;
  for (auto& e : store.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw IoError("checkpoint lacks parameter " + e.name);
    if (it->second->shape() != e.value.shape()) {
      throw ShapeError("checkpoint parameter " + e.name + " has shape " +
                       shape_to_string(it->second->shape()) + ", model expects " +
                       shape_to_string(e.value.shape()));
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), e.value.data().begin());
  }
}

void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace mdt
