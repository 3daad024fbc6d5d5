#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mdt/random.h"
#include "mdt/tensor.h"

namespace mdt {

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Ordered registry of trainable tensors. Registration order is the
/// serialization order, so two models built from the same config agree.
class ParameterStore {
 public:
  /// Registers `value` (rounded to float32 precision) and returns a handle
  /// sharing its storage.
  Tensor add(const std::string& name, Tensor value);
  /// Weight matrix / embedding initialised from a truncated normal
  /// (sigma 0.02, cut at ±2 sigma).
  Tensor add_weight(const std::string& name, Shape shape, Rng& rng, double sigma = 0.02);
  Tensor add_zeros(const std::string& name, Shape shape);
  Tensor add_ones(const std::string& name, Shape shape);

  std::vector<NamedTensor>& entries() { return entries_; }
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  void zero_grad();

 private:
  std::vector<NamedTensor> entries_;
};

// Checkpoint container: magic, u16 version, then per entry
// u16 name length, UTF-8 name, u8 rank, rank × u32 dims, float32 payload.
// All integers and floats little-endian.
inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'T', 'C'};
inline constexpr char kAttentionMagic[4] = {'A', 'T', 'T', 'N'};
inline constexpr std::uint16_t kContainerVersion = 1;

std::vector<char> encode_container(const char (&magic)[4], const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> decode_container(const char (&magic)[4], const std::vector<char>& bytes);

std::vector<char> save_checkpoint(const ParameterStore& store);
/// Copies matching entries into `store`. Every store entry must be present
/// with the same shape.
void load_checkpoint(ParameterStore& store, const std::vector<char>& bytes);

void write_file(const std::filesystem::path& path, const std::vector<char>& bytes);
std::vector<char> read_file(const std::filesystem::path& path);

}  // namespace mdt
