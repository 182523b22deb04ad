#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>

namespace asap {

// Writes via a temp file in the target directory, then renames over the
// destination. An interrupted or throwing writer leaves the destination
// untouched and removes the temp file.
void atomic_write(const std::filesystem::path& path,
                  const std::function<void(std::ostream&)>& writer);

void atomic_write_text(const std::filesystem::path& path, const std::string& text);

std::string read_file(const std::filesystem::path& path);

}  // namespace asap
