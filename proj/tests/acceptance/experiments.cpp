#include <chrono>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "acceptance.hpp"
#include "hulm/error.hpp"
#include "hulm/eval.hpp"
#include "hulm/report.hpp"
#include "hulm/synthetic.hpp"
#include "hulm/training.hpp"

using namespace hulm;

namespace acceptance {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

ModelConfig model_config() {
  ModelConfig m;
  m.d_model = 32;
  m.n_heads = 4;
  m.d_ff = 128;
  m.n_layers = 2;
  m.max_positions = 1024;
  return m;
}

PretrainOptions options(PretrainMode mode) {
  PretrainOptions o;
  o.mode = mode;
  o.author_max_len = 1024;
  o.independent_max_len = 1024;
  o.pack.prepend_bos = true;
  return o;
}

// Base model: full training in standard mode on a separate corpus of long
// single-document authors drawn from the same language.
Checkpoint train_base(std::ostream& log) {
  SyntheticConfig bc;
  bc.seed = 7;
  bc.n_authors = 400;
  bc.docs_per_author = 1;
  bc.doc_len = 200;
  const auto corpus = generate_synthetic_author_corpus(bc);
  std::span<const AuthorStream> all(corpus.streams);
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.max_epochs = 12;
  tc.batch_size = 4;
  tc.trainable = Trainable::full;
  const auto r = pretrain(Checkpoint{init_parameters(model_config()), std::nullopt, {}}, all.subspan(0, 360),
                          all.subspan(360), options(PretrainMode::standard), tc);
  log << fmt("base model: dev NLL %.4f -> %.4f\n", r.initial_dev_loss, r.best_dev_loss);
  return r.checkpoint;
}

struct Comparison {
  std::vector<double> r_huft, r_tft;
  std::vector<double> score_huft, score_tft;  // per test author, averaged over seeds
};

Comparison huft_vs_tft(const Checkpoint& base, const SyntheticCorpus& corpus, std::ostream& log) {
  const auto streams = with_person_labels(corpus, PersonLabel::trait);
  std::span<const AuthorStream> s(streams);
  const auto train = s.subspan(0, 120), dev = s.subspan(120, 40), test = s.subspan(160);
  TaskSpec task;
  task.name = "trait";
  task.level = TaskLevel::person_level;
  task.objective = Objective::regression;
  TaskPackOptions pack;
  pack.max_len = 1024;
  pack.pack.prepend_bos = true;
  std::vector<double> labels;
  for (const auto& it : task_items(task, test)) labels.push_back(it.label);

  Comparison c;
  c.score_huft.assign(labels.size(), 0.0);
  c.score_tft.assign(labels.size(), 0.0);
  const std::vector<std::uint64_t> seeds{42, 3, 1234};
  for (const auto seed : seeds) {
    for (const auto style : {FinetuneStyle::huft, FinetuneStyle::tft}) {
      const bool huft = style == FinetuneStyle::huft;
      TrainConfig tc;
      tc.learning_rate = 1e-3;
      tc.max_epochs = 10;
      tc.seed = seed;
      // Same number of authors per step for both styles.
      tc.batch_size = huft ? 8 : 8 * corpus.config.docs_per_author;
      const auto ft = finetune(base, task, train, dev, style, pack, tc);
      const auto preds = predict_task(ft.checkpoint, ft.head, task, test, style, pack);
      double r = 0.0;
      try {
        r = pearson_r(labels, preds);
      } catch (const DataError&) {
        // constant predictions carry no correlation
      }
      (huft ? c.r_huft : c.r_tft).push_back(r);
      const auto scores = item_scores(labels, preds, false);
      auto& acc = huft ? c.score_huft : c.score_tft;
      for (std::size_t i = 0; i < scores.size(); ++i) acc[i] += scores[i] / static_cast<double>(seeds.size());
      log << (huft ? "  huft" : "  tft ") << " seed " << seed << fmt(": test r = %.4f\n", r);
    }
  }
  return c;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

ExperimentOutcomes run_experiments(std::ostream& log) {
  ExperimentOutcomes out;
  const auto t0 = Clock::now();
  const auto base = train_base(log);
  const double base_secs = seconds_since(t0);

  SyntheticConfig sc;  // 200 authors, style strength 0.8, seed 42
  const auto corpus = generate_synthetic_author_corpus(sc);
  std::span<const AuthorStream> s(corpus.streams);

  {
    const auto t = Clock::now();
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.max_epochs = 5;
    tc.batch_tokens = 4 * sc.docs_per_author * (sc.doc_len + 1);
    const auto train = s.subspan(0, 160), held_out = s.subspan(160);
    const auto h = pretrain(base, train, held_out, options(PretrainMode::hulm), tc);
    const auto st = pretrain(base, train, held_out, options(PretrainMode::standard), tc);
    const double gain = 1.0 - h.best_dev_loss / st.best_dev_loss;
    const double secs = base_secs + seconds_since(t);
    out.ac2.pass = gain >= 0.03 && secs < 600;
    out.ac2.detail = fmt("hulm NLL %.4f vs standard %.4f, %.2f%% lower (need >= 3%%), %.0f s incl. base", h.best_dev_loss,
                         st.best_dev_loss, 100 * gain, secs);
  }

  {
    const auto t = Clock::now();
    const auto c = huft_vs_tft(base, corpus, log);
    const double delta = mean(c.r_huft) - mean(c.r_tft);
    const double p = paired_t_test(c.r_huft, c.r_tft);
    const double p_items = permutation_test(c.score_huft, c.score_tft);
    const double secs = base_secs + seconds_since(t);
    out.ac3.pass = delta >= 0.10 && p < 0.05 && secs < 900;
    out.ac3.detail = fmt("mean r huft %.4f tft %.4f, delta %.4f (need >= 0.10), paired t over seeds p = %.4f", mean(c.r_huft),
                         mean(c.r_tft), delta, p) +
                     fmt("; item squared error huft %.4f tft %.4f, item permutation p = %.4f", -mean(c.score_huft),
                         -mean(c.score_tft), p_items) +
                     fmt("; %.0f s incl. base", secs);
  }

  {
    SyntheticConfig nc;
    nc.style_strength = 0.0;
    const auto null_corpus = generate_synthetic_author_corpus(nc);
    const auto c = huft_vs_tft(base, null_corpus, log);
    const double p = paired_t_test(c.r_huft, c.r_tft);
    const double p_items = permutation_test(c.score_huft, c.score_tft);
    out.ac4.pass = p > 0.05;
    out.ac4.detail = fmt("style 0: mean r huft %.4f tft %.4f, paired t over seeds p = %.4f (need > 0.05)", mean(c.r_huft),
                         mean(c.r_tft), p) +
                     fmt("; item squared error huft %.4f tft %.4f, item permutation p = %.4f", -mean(c.score_huft),
                         -mean(c.score_tft), p_items);
  }
  return out;
}

}  // namespace acceptance
