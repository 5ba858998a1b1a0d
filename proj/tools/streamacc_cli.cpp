// streamacc_cli: corpus generation, training, streamed generation,
// evaluation sweeps and real-time feasibility analysis.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "streamacc/cli.hpp"

namespace cli = streamacc::cli;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  bool force = false;
  std::string out, corpus, checkpoint, runs;
  std::optional<std::string> t_f, k, objective, variants, split = "test", t_f_grid, k_grid;
  std::optional<std::string> tau_sys, tau_jitter, gen_a, gen_b, gen_alpha, jitter, jitter_low, jitter_high;
  std::optional<int> songs, steps, examples, chunks;
  std::optional<std::uint64_t> seed;
  std::size_t count = 4;
  std::size_t cal_examples = 2;
  std::string k_values = "0.02, 0.1, 0.2, 0.5";
  bool measure_time = false;
};

void add_config_options(CLI::App* sc, Options& o) {
  sc->add_option("--config", o.config, "INI configuration file")->check(CLI::ExistingFile);
  sc->add_option("--set", o.sets, "Override a config key: section.key=value (repeatable)");
}

void add_out(CLI::App* sc, Options& o) {
  sc->add_option("--out", o.out, "Output directory")->required();
  sc->add_flag("--force", o.force, "Write into an existing non-empty directory");
}

void add_profile_options(CLI::App* sc, Options& o) {
  sc->add_option("--tau-sys", o.tau_sys, "System latency in seconds");
  sc->add_option("--tau-jitter", o.tau_jitter, "Jitter safety margin in seconds");
  sc->add_option("--gen-a", o.gen_a, "t_gen(k) = a + b k^alpha: a in seconds");
  sc->add_option("--gen-b", o.gen_b, "t_gen(k) = a + b k^alpha: b");
  sc->add_option("--gen-alpha", o.gen_alpha, "t_gen(k) = a + b k^alpha: alpha");
}

// Command flags sit on top of the config file, environment and --set.
cli::RunConfig effective_config(const Options& o) {
  cli::RunConfig c = cli::load_config(o.config, o.sets);
  auto secs = [](const std::optional<std::string>& v, double& dst) {
    if (v) dst = cli::parse_seconds(*v);
  };
  secs(o.t_f, c.t_f_seconds);
  secs(o.k, c.k_seconds);
  secs(o.tau_sys, c.profile.tau_sys);
  secs(o.tau_jitter, c.profile.tau_jitter);
  secs(o.gen_a, c.profile.gen_a);
  secs(o.jitter_low, c.profile.jitter.low);
  secs(o.jitter_high, c.profile.jitter.high);
  if (o.gen_b) cli::set_key(c, "sched.gen_b", *o.gen_b);
  if (o.gen_alpha) cli::set_key(c, "sched.gen_alpha", *o.gen_alpha);
  if (o.jitter) cli::set_key(c, "sched.jitter", *o.jitter);
  if (o.objective) cli::set_key(c, "train.objective", *o.objective);
  if (o.variants) cli::set_key(c, "eval.variants", *o.variants);
  if (o.t_f_grid) {
    std::vector<double> g;
    for (const auto& s : cli::detail::split_list(*o.t_f_grid)) g.push_back(cli::parse_seconds(s));
    c.t_f_grid_seconds = g;
    c.sched_t_f_grid_seconds = g;
  }
  if (o.k_grid) {
    std::vector<double> g;
    for (const auto& s : cli::detail::split_list(*o.k_grid)) g.push_back(cli::parse_seconds(s));
    c.k_grid_seconds = g;
    c.sched_k_grid_seconds = g;
  }
  if (o.songs) c.num_songs = *o.songs;
  if (o.steps) c.train.total_steps = *o.steps;
  if (o.examples) c.eval.num_examples = *o.examples;
  if (o.chunks) c.sim_chunks = *o.chunks;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"streamacc: streaming accompaniment experiments on a synthetic token corpus"};
  app.require_subcommand(1);
  app.footer(
      "Configuration precedence: defaults < --config < STREAMACC_<SECTION>_<KEY> env vars < --set < flags.\n"
      "Durations are in seconds on the 50 Hz frame grid (e.g. --t-f=-1s --k=0.02s). Use '=' for negative values.\n"
      "Exit codes: 0 success, 1 validation error, 2 runtime failure.");
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-stem corpus");
  add_config_options(gen, o);
  add_out(gen, o);
  gen->add_option("--songs", o.songs, "Number of songs");
  gen->add_option("--seed", o.seed, "Corpus seed");

  auto* train = app.add_subcommand("train", "Train one (t_f, k) model");
  add_config_options(train, o);
  add_out(train, o);
  train->add_option("--corpus", o.corpus, "Corpus directory")->required();
  train->add_option("--t-f", o.t_f, "Future visibility in seconds");
  train->add_option("--k", o.k, "Chunk duration in seconds");
  train->add_option("--objective", o.objective, "stream | mlm");
  train->add_option("--steps", o.steps, "Total optimizer steps");
  train->add_option("--seed", o.seed, "Training seed");

  auto* grid = app.add_subcommand("train-grid", "Train every cell of the [train] (t_f, k) grid");
  add_config_options(grid, o);
  add_out(grid, o);
  grid->add_option("--corpus", o.corpus, "Corpus directory")->required();
  grid->add_option("--t-f-grid", o.t_f_grid, "Comma-separated t_f values in seconds");
  grid->add_option("--k-grid", o.k_grid, "Comma-separated k values in seconds");
  grid->add_option("--steps", o.steps, "Total optimizer steps per cell");
  grid->add_option("--seed", o.seed, "Base training seed");

  auto* generate = app.add_subcommand("generate", "Stream-generate accompaniment for corpus examples");
  add_config_options(generate, o);
  add_out(generate, o);
  generate->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  generate->add_option("--corpus", o.corpus, "Corpus directory")->required();
  generate->add_option("--count", o.count, "Number of examples")->capture_default_str();
  generate->add_option("--split", o.split, "train | valid | test")->capture_default_str();
  generate->add_flag("--measure-time", o.measure_time, "Record wall-clock time per chunk (not reproducible)");
  generate->add_option("--seed", o.seed, "Decoding seed");

  auto* eval = app.add_subcommand("eval", "Evaluate one checkpoint on the test split");
  add_config_options(eval, o);
  add_out(eval, o);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  eval->add_option("--corpus", o.corpus, "Corpus directory")->required();
  eval->add_option("--variants", o.variants, "Comma-separated: paired, random_input, prompt_<frames>");
  eval->add_option("--examples", o.examples, "Number of test examples");

  auto* sweep = app.add_subcommand("sweep", "Evaluate a trained grid and report with feasibility columns");
  add_config_options(sweep, o);
  add_out(sweep, o);
  sweep->add_option("--corpus", o.corpus, "Corpus directory")->required();
  sweep->add_option("--runs", o.runs, "Output directory of train-grid")->required();
  sweep->add_option("--t-f-grid", o.t_f_grid, "Comma-separated t_f values in seconds");
  sweep->add_option("--k-grid", o.k_grid, "Comma-separated k values in seconds");
  sweep->add_option("--variants", o.variants, "Comma-separated variants");
  sweep->add_option("--examples", o.examples, "Number of test examples");

  auto* feas = app.add_subcommand("feasibility", "Feasible region over the [sched] (t_f, k) grid");
  add_config_options(feas, o);
  add_out(feas, o);
  add_profile_options(feas, o);
  feas->add_option("--t-f-grid", o.t_f_grid, "Comma-separated t_f values in seconds");
  feas->add_option("--k-grid", o.k_grid, "Comma-separated k values in seconds");

  auto* sim = app.add_subcommand("simulate", "Simulate playback vs generation for one (t_f, k)");
  add_config_options(sim, o);
  add_out(sim, o);
  add_profile_options(sim, o);
  sim->add_option("--t-f", o.t_f, "Future visibility in seconds");
  sim->add_option("--k", o.k, "Chunk duration in seconds");
  sim->add_option("--chunks", o.chunks, "Number of chunks");
  sim->add_option("--seed", o.seed, "Jitter seed");
  sim->add_option("--jitter", o.jitter, "none | uniform | truncated_normal");
  sim->add_option("--jitter-low", o.jitter_low, "Lower jitter bound in seconds");
  sim->add_option("--jitter-high", o.jitter_high, "Upper jitter bound in seconds");

  auto* cal = app.add_subcommand("calibrate-gen-time", "Fit t_gen(k) from measured decode timings");
  add_config_options(cal, o);
  add_out(cal, o);
  cal->add_option("--checkpoint", o.checkpoint, "Streaming checkpoint file")->required();
  cal->add_option("--corpus", o.corpus, "Corpus directory")->required();
  cal->add_option("--k-values", o.k_values, "Comma-separated chunk durations in seconds")->capture_default_str();
  cal->add_option("--examples", o.cal_examples, "Validation examples per chunk duration")->capture_default_str();

  auto* show = app.add_subcommand("show-config", "Print the effective configuration");
  add_config_options(show, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? cli::kExitOk : cli::kExitValidation;
  }

  try {
    cli::RunConfig c = effective_config(o);
    auto& log = std::cout;
    if (*gen) {
      if (o.seed) c.data.seed = *o.seed;
      cli::cmd_gen_data(c, o.out, o.force, log);
    } else if (*train) {
      if (o.seed) c.train.seed = *o.seed;
      cli::cmd_train(c, o.corpus, o.out, o.force, log);
    } else if (*grid) {
      if (o.seed) c.train.seed = *o.seed;
      cli::cmd_train_grid(c, o.corpus, o.out, o.force, log);
    } else if (*generate) {
      if (o.seed) c.sample.seed = *o.seed;
      streamacc::Split split;
      try {
        split = streamacc::parse_split(*o.split);
      } catch (const std::exception& e) {
        throw cli::ConfigError(e.what());
      }
      cli::cmd_generate(c, o.checkpoint, o.corpus, o.out, o.count, split, o.measure_time, o.force, log);
    } else if (*eval) {
      cli::cmd_eval(c, o.checkpoint, o.corpus, o.out, o.force, log);
    } else if (*sweep) {
      cli::cmd_sweep(c, o.corpus, o.runs, o.out, o.force, log);
    } else if (*feas) {
      cli::cmd_feasibility(c, o.out, o.force, log);
    } else if (*sim) {
      if (o.seed) c.sim_seed = *o.seed;
      cli::cmd_simulate(c, o.out, o.force, log);
    } else if (*cal) {
      std::vector<double> ks;
      for (const auto& s : cli::detail::split_list(o.k_values)) ks.push_back(cli::parse_seconds(s));
      cli::cmd_calibrate(c, o.checkpoint, o.corpus, o.out, ks, o.cal_examples, o.force, log);
    } else if (*show) {
      cli::validate(c);
      std::cout << cli::config_text(c);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitRuntime;
  }
  return cli::kExitOk;
}
