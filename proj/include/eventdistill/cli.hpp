#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace eventdistill {

inline constexpr const char* kCommandNames[] = {
    "synth",   "voxelize", "mask", "teacher", "encode",        "simmap",
    "gradcheck", "pretrain", "eval", "probe", "formats-check", "dump-config",
};

// A parsed invocation: the subcommand and every flag of that subcommand with
// defaults filled in, keyed by long name without dashes. When parsing ends
// early (help, usage error) `finished` is set and `exit_code`/`message` hold
// the outcome.
struct Command {
  std::string name;
  std::map<std::string, std::string> flags;
  bool finished = false;
  int exit_code = 0;
  std::string message;

  bool has(const std::string& flag) const { return flags.count(flag) != 0; }
  const std::string& flag(const std::string& name) const { return flags.at(name); }
};

Command parse_args(const std::vector<std::string>& args);

// Runs a parsed command. Exit codes: 0 success, 1 validation failure,
// 2 I/O, 3 numeric abort.
int execute(const Command& command, std::ostream& out, std::ostream& err);

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct FormatCheckEntry {
  std::filesystem::path file;
  bool ok = false;
  std::string detail;
};

// Decodes and re-encodes every EVT1/FTN1/CKP1/PPM/PGM file in `dir` (by
// extension); a file passes when the re-encoded bytes equal the original.
std::vector<FormatCheckEntry> formats_check(const std::filesystem::path& dir);

}  // namespace eventdistill
