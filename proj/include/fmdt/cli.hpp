#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace fmdt::cli {

// Entry point behind the `fmdt` binary; also callable in-process. Exit code 0
// on success, 2 when the config violates its schema (the message names the
// offending field), 1 on runtime failures. On success the path of the run
// directory is the only line written to stdout.
int run(int argc, const char* const* argv);

// 8 hex digits identifying (command, canonical config, seed); run directories
// are named by it.
std::string config_hash_hex(const std::string& command, const std::string& canonical_config,
                            std::uint64_t seed);

// <root>/<tag>, or <root>/<tag>-k for the smallest k >= 1 that is free;
// creates the directory. Existing runs are never reused or overwritten.
std::filesystem::path make_run_dir(const std::filesystem::path& root, const std::string& tag);

}  // namespace fmdt::cli
