#pragma once

// `flexdepth` command-line front end. Every subcommand accepts --config
// (JSON), --seed and --workdir; values resolve flag > config file > default.
// Usage errors exit 2, runtime failures exit 1.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "flexdepth/checkpoint.hpp"
#include "flexdepth/config.hpp"
#include "flexdepth/data.hpp"
#include "flexdepth/decoding.hpp"
#include "flexdepth/evaluation.hpp"
#include "flexdepth/training.hpp"

namespace flexdepth::cli {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

/// Resolved settings for one invocation. The JSON config file mirrors this
/// layout: {"seed", "model": {...}, "train": {...}, "data": {...}, "decode": {...}}.
struct Settings {
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainConfig train;
  GenerateOptions data{Task::kSynthTranslate};
  std::size_t test_size = 0;
  DecodeConfig decode{4, 4, 4, 0.6, 0};
};

inline nlohmann::json to_json_value(const Settings& s) {
  nlohmann::json data = s.data;
  data["test_size"] = s.test_size;
  return {{"seed", s.seed},
          {"model", s.model},
          {"train", s.train},
          {"data", data},
          {"decode",
           {{"enc_layers", s.decode.enc_layers},
            {"dec_layers", s.decode.dec_layers},
            {"beam", s.decode.beam},
            {"alpha", s.decode.alpha},
            {"max_len", s.decode.max_len}}}};
}

inline void apply_config_file(Settings& s, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  auto take = [](const nlohmann::json& obj, const char* key, auto& field) {
    if (obj.contains(key)) obj.at(key).get_to(field);
  };
  take(j, "seed", s.seed);
  if (j.contains("model")) from_json(j.at("model"), s.model);
  if (j.contains("train")) from_json(j.at("train"), s.train);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (d.contains("task")) s.data.task = parse_task(d.at("task").get<std::string>());
    take(d, "size", s.data.size);
    take(d, "test_size", s.test_size);
    take(d, "min_len", s.data.min_len);
    take(d, "max_len", s.data.max_len);
    take(d, "vocab_size", s.data.vocab_size);
  }
  if (j.contains("decode")) {
    const auto& d = j.at("decode");
    take(d, "enc_layers", s.decode.enc_layers);
    take(d, "dec_layers", s.decode.dec_layers);
    take(d, "beam", s.decode.beam);
    take(d, "alpha", s.decode.alpha);
    take(d, "max_len", s.decode.max_len);
  }
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

inline void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

/// Bookkeeping for one command: what ran, with which settings, on which
/// files, and when.
class RunManifest {
 public:
  RunManifest(std::string command, std::vector<std::string> argv)
      : command_(std::move(command)), argv_(std::move(argv)), start_(std::chrono::system_clock::now()) {}

  void input(const std::string& role, const fs::path& p) { inputs_[role] = p.string(); }
  void output(const std::string& role, const fs::path& p) { outputs_[role] = p.string(); }

  /// Writes manifest-<command>.json into `dir`.
  void write(const fs::path& dir, const Settings& settings) const {
    nlohmann::json j{{"command", command_},
                     {"argv", argv_},
                     {"config", to_json_value(settings)},
                     {"seed", settings.seed},
                     {"inputs", inputs_},
                     {"outputs", outputs_},
                     {"tool_version", kVersion},
                     {"started", utc_timestamp(start_)},
                     {"finished", utc_timestamp(std::chrono::system_clock::now())}};
    fs::create_directories(dir);
    write_text_atomic(dir / ("manifest-" + command_ + ".json"), j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::chrono::system_clock::time_point start_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

/// Source column of a TSV corpus, or whole lines of a plain text file.
inline std::vector<std::string> read_sources(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(line.substr(0, line.find('\t')));
  }
  if (out.empty()) throw IoError(path.string() + " has no sentences");
  return out;
}

/// Parses "n,m=path" into a vanilla checkpoint map entry.
inline std::pair<std::pair<int, int>, fs::path> parse_vanilla_entry(const std::string& text) {
  const auto eq = text.find('=');
  const auto comma = text.find(',');
  if (eq == std::string::npos || comma == std::string::npos || comma > eq) {
    throw ConfigError("--vanilla expects n,m=PATH, got '" + text + "'");
  }
  try {
    return {{std::stoi(text.substr(0, comma)), std::stoi(text.substr(comma + 1, eq - comma - 1))},
            fs::path(text.substr(eq + 1))};
  } catch (const std::exception&) {
    throw ConfigError("--vanilla expects n,m=PATH, got '" + text + "'");
  }
}

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"Flexible-depth encoder-decoder training and evaluation", "flexdepth"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  std::string config_path;
  std::string workdir = ".";
  std::uint64_t seed = 0;

  // Overridable settings; `given` tells whether the flag appeared.
  ModelConfig model_flags;
  TrainConfig train_flags;
  GenerateOptions data_flags;
  DecodeConfig decode_flags;
  std::string task_name;
  std::string algorithm_name;
  std::size_t test_size = 0;
  std::multimap<std::string, CLI::Option*> given;

  std::string data_path, vocab_path, out_path, checkpoint, test_path, input_path, report_path;
  std::vector<std::string> inputs, vanilla_entries;
  int last = 0;
  int batches_count = 10;
  bool sum_depths = false;
  bool checkpoint_scalars = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--workdir", workdir, "Root for relative paths");
    sub->add_option("--seed", seed, "Seed for data, initialization and training");
  };
  auto model_options = [&](CLI::App* sub) {
    given.emplace("enc-layers", sub->add_option("--enc-layers", model_flags.enc_layers, "Encoder layers N"));
    given.emplace("dec-layers", sub->add_option("--dec-layers", model_flags.dec_layers, "Decoder layers M"));
    given.emplace("d-model", sub->add_option("--d-model", model_flags.d_model, "Hidden width"));
    given.emplace("heads", sub->add_option("--heads", model_flags.heads, "Attention heads"));
    given.emplace("d-ff", sub->add_option("--d-ff", model_flags.d_ff, "Feed-forward width"));
    given.emplace("vocab-size", sub->add_option("--vocab-size", model_flags.vocab_size, "Vocabulary size"));
    given.emplace("model-max-len", sub->add_option("--model-max-len", model_flags.max_len, "Maximum sequence length"));
    given.emplace("dropout", sub->add_option("--dropout", model_flags.dropout, "Dropout rate"));
    given.emplace("label-smoothing", sub->add_option("--label-smoothing", model_flags.label_smoothing));
  };
  auto decode_options = [&](CLI::App* sub) {
    given.emplace("beam", sub->add_option("--beam", decode_flags.beam, "Beam width (1 = greedy)"));
    given.emplace("alpha", sub->add_option("--alpha", decode_flags.alpha, "Length-penalty exponent"));
    given.emplace("max-len", sub->add_option("--max-len", decode_flags.max_len, "Output cap (0 = source length + 8)"));
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus and its vocabulary");
  common(gen);
  given.emplace("task", gen->add_option("--task", task_name, "copy | reverse | sort | synth_translate"));
  given.emplace("size", gen->add_option("--size", data_flags.size, "Training pairs"));
  given.emplace("test-size", gen->add_option("--test-size", test_size, "Held-out pairs written to --test"));
  given.emplace("min-len", gen->add_option("--min-len", data_flags.min_len));
  given.emplace("data-max-len", gen->add_option("--max-len", data_flags.max_len));
  given.emplace("content-vocab", gen->add_option("--content-vocab", data_flags.vocab_size, "Distinct content tokens"));
  gen->add_option("--out", out_path, "Training corpus TSV")->required();
  gen->add_option("--test", test_path, "Held-out corpus TSV");
  gen->add_option("--vocab", vocab_path, "Vocabulary file")->required();

  auto* train_cmd = app.add_subcommand("train", "Train an N x M or vanilla model");
  common(train_cmd);
  model_options(train_cmd);
  train_cmd->add_option("--data", data_path, "Training corpus TSV")->required();
  train_cmd->add_option("--vocab", vocab_path, "Vocabulary file")->required();
  train_cmd->add_option("--out-dir", out_path, "Checkpoint directory")->required();
  given.emplace("algorithm", train_cmd->add_option("--algorithm", algorithm_name, "nxm | vanilla"));
  given.emplace("steps", train_cmd->add_option("--steps", train_flags.steps));
  given.emplace("batch-size", train_cmd->add_option("--batch-size", train_flags.batch_size));
  given.emplace("warmup", train_cmd->add_option("--warmup", train_flags.warmup_steps));
  given.emplace("base-scale", train_cmd->add_option("--base-scale", train_flags.base_scale));
  given.emplace("checkpoint-every", train_cmd->add_option("--checkpoint-every", train_flags.checkpoint_every));
  given.emplace("keep-last", train_cmd->add_option("--keep-last", train_flags.keep_last));

  auto* avg = app.add_subcommand("avg-checkpoints", "Average checkpoints parameter-wise");
  common(avg);
  avg->add_option("--inputs", inputs, "Checkpoint files");
  avg->add_option("--dir", data_path, "Take the newest checkpoints from this directory");
  avg->add_option("--last", last, "How many of the newest checkpoints to average")->check(CLI::PositiveNumber);
  avg->add_option("--out", out_path, "Averaged checkpoint")->required();

  auto* dec = app.add_subcommand("decode", "Translate a file at depth (n, m)");
  common(dec);
  given.emplace("dec-enc-layers", dec->add_option("--enc-layers", decode_flags.enc_layers, "Encoder layers n"));
  given.emplace("dec-dec-layers", dec->add_option("--dec-layers", decode_flags.dec_layers, "Decoder layers m"));
  decode_options(dec);
  dec->add_option("--checkpoint", checkpoint)->required();
  dec->add_option("--vocab", vocab_path)->required();
  dec->add_option("--input", input_path, "Sources, one per line (TSV: first column)")->required();
  dec->add_option("--out", out_path, "Translations, one per line")->required();
  dec->add_option("--report", report_path, "Timing report JSON");

  auto* bench = app.add_subcommand("benchmark-matrix", "BLEU and decode time for every (n, m)");
  common(bench);
  decode_options(bench);
  bench->add_option("--checkpoint", checkpoint, "N x M checkpoint");
  bench->add_option("--vanilla", vanilla_entries, "Vanilla checkpoint per cell, as n,m=PATH");
  given.emplace("bench-n", bench->add_option("--enc-layers", model_flags.enc_layers, "Rows for a vanilla matrix"));
  given.emplace("bench-m", bench->add_option("--dec-layers", model_flags.dec_layers, "Columns for a vanilla matrix"));
  bench->add_option("--vocab", vocab_path)->required();
  bench->add_option("--test", test_path, "Held-out corpus TSV")->required();
  bench->add_option("--out-dir", out_path, "Report directory")->required();

  auto* oracle = app.add_subcommand("oracle-dist", "Count the best (n, m) per sentence");
  common(oracle);
  decode_options(oracle);
  oracle->add_option("--checkpoint", checkpoint)->required();
  oracle->add_option("--vocab", vocab_path)->required();
  oracle->add_option("--test", test_path)->required();
  oracle->add_option("--out", out_path, "Counts CSV")->required();

  auto* count = app.add_subcommand("count-params", "Print the trainable parameter count");
  common(count);
  model_options(count);
  count->add_flag("--sum-depths", sum_depths, "Sum over every (n, m) truncation");
  count->add_flag("--checkpoint-scalars", checkpoint_scalars, "Include two Adam slots per parameter");

  auto* bench_steps = app.add_subcommand("step-bench", "Compare training step times");
  common(bench_steps);
  model_options(bench_steps);
  bench_steps->add_option("--data", data_path)->required();
  bench_steps->add_option("--vocab", vocab_path)->required();
  given.emplace("bench-batch-size", bench_steps->add_option("--batch-size", train_flags.batch_size));
  bench_steps->add_option("--batches", batches_count, "Batches, the first one untimed")->check(CLI::Range(10, 1000000));
  bench_steps->add_option("--out", out_path, "Report JSON")->required();

  std::vector<const char*> argv{"flexdepth"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  auto was_given = [&](const char* key) {
    const auto [lo, hi] = given.equal_range(key);
    return std::any_of(lo, hi, [](const auto& kv) { return kv.second->count() > 0; });
  };

  try {
    CLI::App* sub = app.get_subcommands().front();
    const fs::path root(workdir);
    auto resolve = [&](const std::string& p) { return p.empty() ? fs::path() : (fs::path(p).is_absolute() ? fs::path(p) : root / p); };

    Settings s;
    if (!config_path.empty()) apply_config_file(s, resolve(config_path));
    if (sub->get_option("--seed")->count() > 0) s.seed = seed;

    if (was_given("enc-layers")) s.model.enc_layers = model_flags.enc_layers;
    if (was_given("dec-layers")) s.model.dec_layers = model_flags.dec_layers;
    if (was_given("bench-n")) s.model.enc_layers = model_flags.enc_layers;
    if (was_given("bench-m")) s.model.dec_layers = model_flags.dec_layers;
    if (was_given("d-model")) s.model.d_model = model_flags.d_model;
    if (was_given("heads")) s.model.heads = model_flags.heads;
    if (was_given("d-ff")) s.model.d_ff = model_flags.d_ff;
    if (was_given("vocab-size")) s.model.vocab_size = model_flags.vocab_size;
    if (was_given("model-max-len")) s.model.max_len = model_flags.max_len;
    if (was_given("dropout")) s.model.dropout = model_flags.dropout;
    if (was_given("label-smoothing")) s.model.label_smoothing = model_flags.label_smoothing;
    if (was_given("algorithm")) s.train.algorithm = parse_algorithm(algorithm_name);
    if (was_given("steps")) s.train.steps = train_flags.steps;
    if (was_given("batch-size") || was_given("bench-batch-size")) s.train.batch_size = train_flags.batch_size;
    if (was_given("warmup")) s.train.warmup_steps = train_flags.warmup_steps;
    if (was_given("base-scale")) s.train.base_scale = train_flags.base_scale;
    if (was_given("checkpoint-every")) s.train.checkpoint_every = train_flags.checkpoint_every;
    if (was_given("keep-last")) s.train.keep_last = train_flags.keep_last;
    if (was_given("task")) s.data.task = parse_task(task_name);
    if (was_given("size")) s.data.size = data_flags.size;
    if (was_given("test-size")) s.test_size = test_size;
    if (was_given("min-len")) s.data.min_len = data_flags.min_len;
    if (was_given("data-max-len")) s.data.max_len = data_flags.max_len;
    if (was_given("content-vocab")) s.data.vocab_size = data_flags.vocab_size;
    if (was_given("dec-enc-layers")) s.decode.enc_layers = decode_flags.enc_layers;
    if (was_given("dec-dec-layers")) s.decode.dec_layers = decode_flags.dec_layers;
    if (was_given("beam")) s.decode.beam = decode_flags.beam;
    if (was_given("alpha")) s.decode.alpha = decode_flags.alpha;
    if (was_given("max-len")) s.decode.max_len = decode_flags.max_len;
    s.train.seed = s.seed;
    s.data.seed = s.seed;
    s.data.model_max_len = static_cast<std::size_t>(s.model.max_len);

    const std::string name = sub->get_name();
    RunManifest manifest(name, args);

    if (name == "gen-data") {
      GenerateOptions opt = s.data;
      opt.size += s.test_size;
      Corpus all = generate(opt);
      Corpus train_part = all;
      train_part.pairs.resize(s.data.size);
      const auto out = resolve(out_path);
      const auto vocab_file = resolve(vocab_path);
      ensure_parent(out);
      ensure_parent(vocab_file);
      write_corpus(out, train_part);
      write_vocab(vocab_file, build_vocab(train_part));
      nlohmann::json meta = s.data;
      meta["test_size"] = s.test_size;
      write_text_atomic(fs::path(out.string() + ".json"), meta.dump(2) + "\n");
      manifest.output("corpus", out);
      manifest.output("vocab", vocab_file);
      if (s.test_size > 0) {
        if (test_path.empty()) throw ConfigError("gen-data: --test-size needs --test");
        Corpus held = all;
        held.pairs.assign(all.pairs.begin() + static_cast<std::ptrdiff_t>(s.data.size), all.pairs.end());
        const auto test_file = resolve(test_path);
        ensure_parent(test_file);
        write_corpus(test_file, held);
        manifest.output("test", test_file);
      }
      manifest.write(out.parent_path(), s);
      return 0;
    }

    if (name == "train") {
      const Corpus corpus = read_corpus(resolve(data_path));
      const Vocab vocab = read_vocab(resolve(vocab_path));
      s.model.vocab_size = static_cast<int>(vocab.size());
      s.model.validate();
      ModelParams params = init_params(s.model, s.seed);
      const auto dir = resolve(out_path);
      const auto result = train(params, corpus, vocab, s.train, dir, [](std::int64_t step, double loss) {
        std::cerr << "step " << step << "  loss " << loss << '\n';
      });
      manifest.input("data", resolve(data_path));
      manifest.input("vocab", resolve(vocab_path));
      for (const auto& p : result.checkpoints) manifest.output(p.filename().string(), p);
      manifest.output("log", dir / "train.log");
      manifest.write(dir, s);
      return 0;
    }

    if (name == "avg-checkpoints") {
      std::vector<fs::path> paths;
      for (const auto& p : inputs) paths.push_back(resolve(p));
      if (!data_path.empty()) {
        const auto found = latest_checkpoints(resolve(data_path), last > 0 ? static_cast<std::size_t>(last) : 5);
        paths.insert(paths.end(), found.begin(), found.end());
      }
      if (paths.empty()) throw ConfigError("avg-checkpoints: give --inputs or --dir");
      const ModelParams averaged = average_checkpoints(paths);
      const auto out = resolve(out_path);
      ensure_parent(out);
      save_checkpoint(out, averaged, 0);
      for (std::size_t k = 0; k < paths.size(); ++k) manifest.input("checkpoint." + std::to_string(k), paths[k]);
      manifest.output("checkpoint", out);
      manifest.write(out.parent_path(), s);
      return 0;
    }

    if (name == "decode") {
      const auto sources = read_sources(resolve(input_path));
      const auto timed = timed_decode_corpus(resolve(checkpoint), resolve(vocab_path), sources, s.decode);
      const auto out = resolve(out_path);
      ensure_parent(out);
      std::ostringstream text;
      for (const auto& line : timed.translations) text << line << '\n';
      write_text_atomic(out, text.str());
      manifest.input("checkpoint", resolve(checkpoint));
      manifest.input("vocab", resolve(vocab_path));
      manifest.input("sources", resolve(input_path));
      manifest.output("translations", out);
      const auto report = timing_report(s.decode, timed);
      if (!report_path.empty()) {
        const auto rp = resolve(report_path);
        ensure_parent(rp);
        write_text_atomic(rp, report.dump(2) + "\n");
        manifest.output("report", rp);
      } else {
        std::cout << report.dump() << '\n';
      }
      manifest.write(out.parent_path(), s);
      return 0;
    }

    if (name == "benchmark-matrix") {
      const Corpus test = read_corpus(resolve(test_path));
      BenchmarkMatrix matrix;
      if (!checkpoint.empty()) {
        matrix = quality_timing_matrix(resolve(checkpoint), resolve(vocab_path), test, s.decode);
        manifest.input("checkpoint", resolve(checkpoint));
      } else if (!vanilla_entries.empty()) {
        std::map<std::pair<int, int>, fs::path> cells;
        for (const auto& e : vanilla_entries) {
          auto [key, path] = parse_vanilla_entry(e);
          cells[key] = resolve(path.string());
          manifest.input("vanilla." + std::to_string(key.first) + "," + std::to_string(key.second), cells[key]);
        }
        matrix = quality_timing_matrix(cells, s.model.enc_layers, s.model.dec_layers, resolve(vocab_path), test,
                                       s.decode);
      } else {
        throw ConfigError("benchmark-matrix: give --checkpoint or --vanilla");
      }
      const auto dir = resolve(out_path);
      fs::create_directories(dir);
      const std::pair<MatrixMetric, const char*> metrics[] = {{MatrixMetric::kBleu, "bleu"},
                                                              {MatrixMetric::kSecondsTotal, "seconds_total"},
                                                              {MatrixMetric::kSecondsDecode, "seconds_decode"}};
      std::ostringstream tables;
      for (const auto& [metric, label] : metrics) {
        write_text_atomic(dir / (std::string(label) + ".csv"), render_csv(matrix, metric));
        manifest.output(label, dir / (std::string(label) + ".csv"));
        tables << label << " (" << matrix.model_tag << ")\n" << render_table(matrix, metric) << '\n';
      }
      write_text_atomic(dir / "matrix.txt", tables.str());
      manifest.output("tables", dir / "matrix.txt");
      std::cout << tables.str();
      for (const auto& err : matrix.errors) std::cerr << "flexdepth: " << err << '\n';
      manifest.write(dir, s);
      return matrix.errors.empty() ? 0 : 1;
    }

    if (name == "oracle-dist") {
      const Corpus test = read_corpus(resolve(test_path));
      const ModelParams params = load_checkpoint(resolve(checkpoint)).params;
      const Vocab vocab = read_vocab(resolve(vocab_path));
      const auto dist = oracle_distribution(params, vocab, test, s.decode, configured_threads());
      const auto out = resolve(out_path);
      ensure_parent(out);
      write_text_atomic(out, render_csv(dist));
      manifest.input("checkpoint", resolve(checkpoint));
      manifest.input("test", resolve(test_path));
      manifest.output("counts", out);
      manifest.write(out.parent_path(), s);
      return 0;
    }

    if (name == "count-params") {
      s.model.validate();
      const auto one = checkpoint_scalars ? std::function<std::int64_t(const ModelConfig&)>(
                                                [](const ModelConfig& c) { return count_checkpoint_scalars(c); })
                                          : std::function<std::int64_t(const ModelConfig&)>(
                                                [](const ModelConfig& c) { return count_params(c); });
      std::cout << (sum_depths ? sum_over_depths(s.model, one) : one(s.model)) << '\n';
      return 0;
    }

    if (name == "step-bench") {
      const Corpus corpus = read_corpus(resolve(data_path));
      const Vocab vocab = read_vocab(resolve(vocab_path));
      s.model.vocab_size = static_cast<int>(vocab.size());
      BatchOptions bopt{static_cast<std::size_t>(s.train.batch_size), s.seed, true,
                        static_cast<std::size_t>(s.model.max_len)};
      auto all = batches(corpus, vocab, bopt, 0);
      if (all.size() < static_cast<std::size_t>(batches_count)) {
        throw ConfigError("step-bench: corpus yields only " + std::to_string(all.size()) + " batches");
      }
      all.resize(static_cast<std::size_t>(batches_count));
      const auto report = step_time_benchmark(s.model, s.train, all);
      const auto out = resolve(out_path);
      ensure_parent(out);
      const nlohmann::json j = report;
      write_text_atomic(out, j.dump(2) + "\n");
      std::cout << "r_nxm " << report.r_nxm << "  r_sum " << report.r_sum << '\n';
      manifest.input("data", resolve(data_path));
      manifest.output("report", out);
      manifest.write(out.parent_path(), s);
      return 0;
    }
    throw ConfigError("unknown subcommand " + name);
  } catch (const std::exception& e) {
    std::cerr << "flexdepth: " << e.what() << '\n';
    return 1;
  }
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace flexdepth::cli
