// judge.hpp: pairwise caption scoring by a judge model.
//
// Each pair is rated twice with the answer order swapped to cancel position
// bias; a caption's final Accuracy/Relevancy is the mean over both orderings.

#pragma once

#include "capval/backend.hpp"
#include "capval/llm_extraction.hpp"

namespace capval {

// Reconstructed template. The reply grammar it asks for is what the parser
// accepts: "Accuracy: <int>" / "Relevancy: <int>" per answer, answer 1 first.
inline const char* default_judge_template() {
  return
      "You are shown an image and two candidate descriptions of it.\n"
      "\n"
      "Answer 1: {answer1}\n"
      "\n"
      "Answer 2: {answer2}\n"
      "\n"
      "Score each answer on Accuracy (1-10), the factual correctness of the description "
      "(penalize content inconsistent with the image), and Relevancy (1-10), the coverage of "
      "the image's core elements and main subjects.\n"
      "\n"
      "Reply for Answer 1 and then Answer 2, two lines per answer, exactly in this format:\n"
      "Accuracy: <int>\n"
      "Relevancy: <int>";
}

struct JudgeOrdering {
  bool a_is_answer1 = true;
  int accuracy_answer1 = 0;
  int relevancy_answer1 = 0;
  int accuracy_answer2 = 0;
  int relevancy_answer2 = 0;
  std::string reply;
};

struct JudgeScores {
  double accuracy = 0.0;   // mean over both orderings, in [1,10]
  double relevancy = 0.0;
  std::vector<JudgeOrdering> orderings;
};

struct ParsedJudgeReply {
  int accuracy_answer1, relevancy_answer1, accuracy_answer2, relevancy_answer2;
};

inline std::optional<ParsedJudgeReply> parse_judge_reply(const std::string& reply) {
  std::vector<int> accuracies, relevancies;
  std::size_t pos = 0;
  auto read_int_after = [&](std::size_t at, std::size_t len) -> std::optional<int> {
    std::size_t i = at + len;
    while (i < reply.size() && (reply[i] == ' ' || reply[i] == '\t')) ++i;
    std::size_t start = i;
    while (i < reply.size() && std::isdigit(static_cast<unsigned char>(reply[i]))) ++i;
    if (i == start) return std::nullopt;
    return std::stoi(reply.substr(start, i - start));
  };
  while (pos < reply.size()) {
    const std::size_t acc = reply.find("Accuracy:", pos);
    const std::size_t rel = reply.find("Relevancy:", pos);
    if (acc == std::string::npos && rel == std::string::npos) break;
    if (acc < rel) {
      if (auto v = read_int_after(acc, 9)) accuracies.push_back(*v);
      pos = acc + 9;
    } else {
      if (auto v = read_int_after(rel, 10)) relevancies.push_back(*v);
      pos = rel + 10;
    }
  }
  if (accuracies.size() < 2 || relevancies.size() < 2) return std::nullopt;
  for (int v : {accuracies[0], accuracies[1], relevancies[0], relevancies[1]}) {
    if (v < 1 || v > 10) return std::nullopt;
  }
  return ParsedJudgeReply{accuracies[0], relevancies[0], accuracies[1], relevancies[1]};
}

inline PromptContext judge_context(const std::optional<ImageRef>& image, const std::string& tmpl,
                                   const std::string& answer1, const std::string& answer2,
                                   bool strict_retry) {
  PromptContext ctx;
  ctx.image = image;
  std::string prompt = render_template(tmpl, "answer1", answer1);
  prompt = render_template(prompt, "answer2", answer2);
  if (strict_retry) {
    prompt +=
        "\n\nRespond with exactly four lines and nothing else:\n"
        "Accuracy: <integer 1-10>\nRelevancy: <integer 1-10>\n"
        "Accuracy: <integer 1-10>\nRelevancy: <integer 1-10>";
  }
  ctx.user_text = std::move(prompt);
  ctx.params.temperature = 0.0;
  ctx.params.max_new_tokens = 64;
  ctx.params.top_logprobs = 1;
  return ctx;
}

inline JudgeOrdering judge_one_ordering(Backend& judge, const std::optional<ImageRef>& image,
                                        const std::string& answer1, const std::string& answer2,
                                        const std::string& tmpl, bool a_is_answer1) {
  GenerationResult reply = judge.generate(judge_context(image, tmpl, answer1, answer2, false));
  std::optional<ParsedJudgeReply> parsed = parse_judge_reply(reply.text);
  if (!parsed) {
    // One retry with a stricter format instruction appended.
    reply = judge.generate(judge_context(image, tmpl, answer1, answer2, true));
    parsed = parse_judge_reply(reply.text);
  }
  if (!parsed) {
    throw MalformedReplyError("judge reply does not contain two Accuracy/Relevancy pairs",
                              reply.text);
  }
  JudgeOrdering o;
  o.a_is_answer1 = a_is_answer1;
  o.accuracy_answer1 = parsed->accuracy_answer1;
  o.relevancy_answer1 = parsed->relevancy_answer1;
  o.accuracy_answer2 = parsed->accuracy_answer2;
  o.relevancy_answer2 = parsed->relevancy_answer2;
  o.reply = reply.text;
  return o;
}

// Rates (caption_a, caption_b) under both answer orderings and averages.
inline std::pair<JudgeScores, JudgeScores> judge_scores(
    Backend& judge, const std::optional<ImageRef>& image, const std::string& caption_a,
    const std::string& caption_b, const std::string& tmpl = default_judge_template()) {
  const JudgeOrdering first = judge_one_ordering(judge, image, caption_a, caption_b, tmpl, true);
  const JudgeOrdering second = judge_one_ordering(judge, image, caption_b, caption_a, tmpl, false);

  JudgeScores a, b;
  a.accuracy = (first.accuracy_answer1 + second.accuracy_answer2) / 2.0;
  a.relevancy = (first.relevancy_answer1 + second.relevancy_answer2) / 2.0;
  b.accuracy = (first.accuracy_answer2 + second.accuracy_answer1) / 2.0;
  b.relevancy = (first.relevancy_answer2 + second.relevancy_answer1) / 2.0;
  a.orderings = {first, second};
  b.orderings = {first, second};
  return {a, b};
}

}  // namespace capval
