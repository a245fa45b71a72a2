#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "quicknat/network.hpp"
#include "quicknat/trainer.hpp"

namespace quicknat {

/// A view network's weights, running statistics and (optionally) optimizer state.
///
/// On disk: a text manifest ("QNATCKPT 1", "meta key value" lines, one
/// "tensor name dtype offset d0 d1 ..." line per tensor, "END") followed by a
/// single raw little-endian blob. Offsets are byte offsets into the blob.
template <typename T>
struct Checkpoint {
  View view = View::coronal;
  NetworkParameters<T> params;
  std::optional<OptimizerState<T>> optimizer;
  std::map<std::string, std::string> meta;
};

/// Writes atomically (temp file then rename).
template <typename T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path);

/// Throws DataError on malformed or truncated files. Tensors stored at a
/// different precision are converted.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace quicknat
