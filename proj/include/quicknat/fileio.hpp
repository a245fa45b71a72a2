#pragma once

#include <filesystem>
#include <functional>
#include <ostream>
#include <string>

namespace quicknat {

/// Writes through a temporary sibling file that is renamed over `path` only
/// after `writer` finished and the stream flushed cleanly.
void atomic_write(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer);

std::string read_text_file(const std::filesystem::path& path);

}  // namespace quicknat
