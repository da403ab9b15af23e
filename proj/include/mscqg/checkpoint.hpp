// Binary checkpoints. Layout: 8-byte magic "MSCQGCKP", u32 format version,
// u32 section count, then sections of {4-byte tag, u64 payload size,
// payload}. Integers and float32 arrays are little-endian.
//
//   VOCB  u32 count, then count x {u32 length, bytes}: regular words in id order
//   GENR  u32 V, H, layers, heads, max_context; f64 layer-norm eps, final loss;
//         tensors in GeneratorParams::parameters() order
//   CORD  u32 H, blocks, heads, max_length; f64 layer-norm eps;
//         tensors in CoordinatorParams::parameters() order
#pragma once

#include "mscqg/coordinator.hpp"
#include "mscqg/corpus.hpp"
#include "mscqg/docgen.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>

namespace mscqg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::optional<Vocabulary> vocab;
  std::optional<GeneratorParams> generator;
  std::optional<CoordinatorParams> coordinator;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mscqg
