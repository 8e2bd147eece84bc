#pragma once

// Versioned tensor container shared by backbone weights and adapter checkpoints.
// Layout is documented in docs/checkpoint_format.md.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cellprompt/nn.hpp"

namespace cellprompt {

inline constexpr int kContainerFormatVersion = 1;

struct NamedMatrix {
  std::string name;
  nn::Matrix value;
};

struct Container {
  std::string kind;         ///< "backbone" or "adapter"
  int schema_version = 1;   ///< schema of `metadata` for this kind
  nlohmann::json metadata;  ///< free-form, kind-specific
  std::vector<NamedMatrix> tensors;

  /// Tensor by name; throws NotFound.
  const nn::Matrix& tensor(const std::string& name) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(std::span<const std::uint8_t> bytes);
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Incremental SHA-256.
class Sha256 {
public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t size);
  void update(const std::string& s) { update(s.data(), s.size()); }
  void update(const nn::Matrix& m);
  std::string hex_digest();

private:
  void* ctx_;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);

} // namespace cellprompt
