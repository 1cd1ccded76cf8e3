#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace dppo {

// Writes to a sibling temp file and renames it into place, so `path` is either
// the complete new content or untouched. Throws Error on I/O failure.
void atomic_write(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

// Shortest decimal text that round-trips ("%.17g" fallback), '.' decimal.
std::string format_real(double x);

}  // namespace dppo
