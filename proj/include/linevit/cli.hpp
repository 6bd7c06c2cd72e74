#pragma once

#include "linevit/config.hpp"
#include "linevit/synthgen.hpp"
#include "linevit/trainer.hpp"

#include <string>

namespace linevit::cli {

// Builders mapping dotted config keys onto the stage configs. CLI flags are
// merged into Config before these run, so precedence is flag > file >
// built-in default.
gen::GenConfig make_gen_config(const Config& cfg);
vit::ModelConfig make_model_config(const Config& cfg, gen::DatasetVariant variant,
                                   int image_size);
train::TrainConfig make_train_config(const Config& cfg);

// Subcommand bodies. They throw on failure; main() maps exceptions to exit
// codes (ConfigError -> 2, anything else -> 1).
int cmd_gen(const Config& cfg);
int cmd_train(const Config& cfg);
int cmd_eval(const Config& cfg);
int cmd_analyze(const Config& cfg);
int cmd_report(const Config& cfg);
int cmd_all(const Config& cfg);

// Default file layout under a run root.
std::string dataset_dir(const Config& cfg);
std::string train_dir(const Config& cfg);
std::string eval_dir(const Config& cfg);
std::string stats_dir(const Config& cfg);
std::string figures_dir(const Config& cfg);

} // namespace linevit::cli
