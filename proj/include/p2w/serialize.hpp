#pragma once

// Binary model files. Layout is documented in docs/FORMAT.md.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "p2w/error.hpp"
#include "p2w/netgraph.hpp"

namespace p2w {

inline constexpr std::uint32_t kFormatVersion = 1;

enum class SerializeCode { bad_magic = 1, unsupported_version, truncated, bad_record };

class SerializeError : public Error {
 public:
  SerializeError(SerializeCode code, const std::string& what)
      : Error(ErrorKind::data, what), code_(code) {}
  SerializeCode code() const { return code_; }

 private:
  SerializeCode code_;
};

std::vector<std::uint8_t> serialize(Model& model);
Model deserialize(std::span<const std::uint8_t> bytes);

void save_model(Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace p2w
