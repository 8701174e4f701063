#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "discap/cli/config.hpp"
#include "discap/error.hpp"

namespace discap::cli {

// Exit status of a failure class.
int exit_code(ErrorCode code);

void gen_data(const RunConfig& config, std::ostream& log);
void build_vocab(const RunConfig& config, std::ostream& log);
void train_retriever(const RunConfig& config, std::ostream& log);
void pretrain_captioner(const RunConfig& config, std::ostream& log);
void train_rl(const RunConfig& config, std::ostream& log);
void generate(const RunConfig& config, std::ostream& log);
void evaluate(const RunConfig& config, std::ostream& log);

// Parses `args` (without the program name), runs one subcommand and returns
// the process exit status. Failures print one "error_code: message" line to
// `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace discap::cli
