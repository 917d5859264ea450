// config.hpp: experiment configuration file (TOML) with environment-variable
// overrides for secrets. Relative paths resolve against the config file's
// directory so configs stay portable and diffable.

#pragma once

#include <cstdlib>
#include <filesystem>

#include "capval/judge.hpp"
#include "capval/pipeline.hpp"
#include "capval/toml_lite.hpp"

namespace capval {

struct BackendSettings {
  std::string kind = "openai";  // "openai" | "mock"
  std::string url = "http://127.0.0.1:8000/v1";
  std::string model;
  std::string api_key_env = "CAPVAL_API_KEY";
  std::string api_key;  // resolved from the environment, never from the file
  std::string mock_fixture;
  int timeout_seconds = 120;
  int max_in_flight = 4;
  int max_top_logprobs = 50;
  bool supports_text_only = true;
  bool continue_final_message = true;
};

struct EmbeddingSettings {
  std::string text_url;   // /v1/embeddings-style endpoint for text
  std::string image_url;  // endpoint taking an image data URL as input
  std::string model;
  std::string api_key;

  bool configured() const { return !text_url.empty(); }
};

struct AppConfig {
  BackendSettings backend;
  RunConfig run;
  EmbeddingSettings embeddings;
  std::string lexicon_path;
  std::string extraction_template;  // loaded text, {caption} placeholder
  std::string judge_template;       // loaded text, {answer1}/{answer2}
  int workers = 1;
  std::vector<double> probe_boundaries{0.2};
  std::filesystem::path config_dir;
};

inline std::string resolve_path(const std::filesystem::path& base, const std::string& path) {
  if (path.empty()) return path;
  std::filesystem::path p(path);
  if (p.is_absolute()) return p.string();
  return (base / p).lexically_normal().string();
}

inline std::string read_text_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string("cannot open ") + what + ": " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void apply_decoding_section(const TomlTable& toml, const std::string& section,
                                   DecodingParams& params) {
  params.temperature = toml.get_double(section + ".temperature", params.temperature);
  params.top_k = static_cast<int>(toml.get_int(section + ".top_k", params.top_k));
  params.max_new_tokens =
      static_cast<int>(toml.get_int(section + ".max_new_tokens", params.max_new_tokens));
  params.top_logprobs =
      static_cast<int>(toml.get_int(section + ".top_logprobs", params.top_logprobs));
}

inline AppConfig load_app_config(const std::string& path) {
  const TomlTable toml = load_toml(path);
  AppConfig config;
  config.config_dir = std::filesystem::absolute(std::filesystem::path(path)).parent_path();

  auto& b = config.backend;
  b.kind = toml.get_string("backend.kind", b.kind);
  b.url = toml.get_string("backend.url", b.url);
  b.model = toml.get_string("backend.model", b.model);
  b.api_key_env = toml.get_string("backend.api_key_env", b.api_key_env);
  b.mock_fixture = resolve_path(config.config_dir, toml.get_string("backend.fixture", ""));
  b.timeout_seconds = static_cast<int>(toml.get_int("backend.timeout_seconds", b.timeout_seconds));
  b.max_in_flight = static_cast<int>(toml.get_int("backend.max_in_flight", b.max_in_flight));
  b.max_top_logprobs =
      static_cast<int>(toml.get_int("backend.max_top_logprobs", b.max_top_logprobs));
  b.supports_text_only = toml.get_bool("backend.supports_text_only", b.supports_text_only);
  b.continue_final_message =
      toml.get_bool("backend.continue_final_message", b.continue_final_message);
  if (b.kind != "openai" && b.kind != "mock") {
    throw ConfigError("backend.kind must be \"openai\" or \"mock\", got \"" + b.kind + "\"");
  }
  if (b.kind == "mock" && b.mock_fixture.empty()) {
    throw ConfigError("backend.kind = \"mock\" requires backend.fixture");
  }
  if (const char* url = std::getenv("CAPVAL_BACKEND_URL")) b.url = url;
  if (const char* key = std::getenv(b.api_key_env.c_str())) b.api_key = key;

  auto& r = config.run;
  r.strategy = strategy_from_string(toml.get_string("run.strategy", to_string(r.strategy)));
  // Headline defaults differ per strategy: N=10 for best-of-N, N=3 for
  // filter-then-aggregate, unless the config pins a value.
  if (toml.has("run.n_candidates")) {
    r.n_candidates = static_cast<int>(toml.get_int("run.n_candidates"));
  } else {
    r.n_candidates = r.strategy == Strategy::best_of_n ? 10 : 3;
  }
  r.alpha = toml.get_double("run.alpha", r.alpha);
  r.base_seed = toml.get_int("run.base_seed", r.base_seed);
  r.extraction_mode = extraction_mode_from_string(
      toml.get_string("run.extraction_mode", to_string(r.extraction_mode)));
  r.verifier_method =
      verifier_method_from_string(toml.get_string("run.verifier", to_string(r.verifier_method)));
  r.aggregate_with_image = toml.get_bool("run.aggregate_with_image", r.aggregate_with_image);
  if (toml.get_string("run.lpfv_aggregation", "all_tokens_product") == "first_token_only") {
    r.aggregation = LpfvAggregation::first_token_only;
  }
  r.score_top_logprobs =
      static_cast<int>(toml.get_int("run.score_top_logprobs", r.score_top_logprobs));
  r.captioning_prompt = toml.get_string("prompts.captioning", r.captioning_prompt);
  r.lpfv_prompt = toml.get_string("prompts.lpfv", r.lpfv_prompt);
  apply_decoding_section(toml, "decoding.candidates", r.candidate_params);
  apply_decoding_section(toml, "decoding.final", r.final_params);
  r.validate();

  config.lexicon_path = resolve_path(config.config_dir, toml.get_string("run.lexicon", ""));

  const std::string extraction_path =
      resolve_path(config.config_dir, toml.get_string("prompts.extraction_template", ""));
  config.extraction_template = extraction_path.empty()
                                   ? default_extraction_template()
                                   : read_text_file(extraction_path, "extraction template");
  const std::string judge_path =
      resolve_path(config.config_dir, toml.get_string("prompts.judge_template", ""));
  config.judge_template = judge_path.empty() ? default_judge_template()
                                             : read_text_file(judge_path, "judge template");

  config.embeddings.text_url = toml.get_string("embeddings.text_url", "");
  config.embeddings.image_url = toml.get_string("embeddings.image_url", "");
  config.embeddings.model = toml.get_string("embeddings.model", "");
  if (const char* key = std::getenv(
          toml.get_string("embeddings.api_key_env", "CAPVAL_EMBEDDINGS_KEY").c_str())) {
    config.embeddings.api_key = key;
  }
  if ((r.verifier_method == VerifierMethod::clip_object ||
       r.verifier_method == VerifierMethod::clip_sentence) &&
      !config.embeddings.configured()) {
    throw ConfigError("verifier '" + std::string(to_string(r.verifier_method)) +
                      "' needs an [embeddings] section with text_url (and image_url)");
  }

  config.workers = static_cast<int>(toml.get_int("runner.workers", config.workers));
  if (config.workers < 1) throw ConfigError("runner.workers must be >= 1");
  config.probe_boundaries = toml.get_double_array("probe.boundaries", config.probe_boundaries);
  return config;
}

}  // namespace capval
