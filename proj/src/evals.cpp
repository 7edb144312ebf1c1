#include "clm/evals.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "clm/error.hpp"

namespace clm {

using ojson = nlohmann::ordered_json;

EditCounts edit_distance(std::span<const std::string> ref, std::span<const std::string> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<int> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> int& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});

  EditCounts c;
  c.distance = at(n, m);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const int sub = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      if (at(i, j) == at(i - 1, j - 1) + sub) {
        c.substitutions += sub;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

std::vector<std::string> tokenize(std::string_view s, ErrorUnit unit) {
  std::vector<std::string> out;
  if (unit == ErrorUnit::Char) {
    for (char ch : s) out.emplace_back(1, ch);
    return out;
  }
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && s[i] == ' ') ++i;
    const std::size_t j = s.find(' ', i);
    const std::size_t e = j == std::string_view::npos ? s.size() : j;
    if (e > i) out.emplace_back(s.substr(i, e - i));
    i = e;
  }
  return out;
}

RateResult error_rate(std::span<const std::string> refs, std::span<const std::string> hyps, ErrorUnit unit) {
  if (refs.size() != hyps.size()) throw InputError("reference and hypothesis counts differ");
  RateResult r;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto rt = tokenize(refs[k], unit), ht = tokenize(hyps[k], unit);
    r.errors += edit_distance(rt, ht).distance;
    if (rt.empty()) {
      ++r.empty_refs;
      r.ref_length += 1;
    } else {
      r.ref_length += static_cast<int>(rt.size());
    }
  }
  r.rate = r.ref_length == 0 ? 0.0 : static_cast<double>(r.errors) / r.ref_length;
  return r;
}

double wer(std::span<const std::string> refs, std::span<const std::string> hyps) {
  return error_rate(refs, hyps, ErrorUnit::Word).rate;
}

double cer(std::span<const std::string> refs, std::span<const std::string> hyps) {
  return error_rate(refs, hyps, ErrorUnit::Char).rate;
}

BleuResult bleu(std::span<const std::string> refs, std::span<const std::string> hyps, int max_n) {
  if (refs.empty()) throw InputError("bleu: empty corpus");
  if (refs.size() != hyps.size()) throw InputError("bleu: reference and hypothesis counts differ");
  std::vector<long> matches(static_cast<std::size_t>(max_n), 0), totals(static_cast<std::size_t>(max_n), 0);
  BleuResult res;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto r = tokenize(refs[k], ErrorUnit::Word), h = tokenize(hyps[k], ErrorUnit::Word);
    res.ref_length += static_cast<int>(r.size());
    res.hyp_length += static_cast<int>(h.size());
    for (int n = 1; n <= max_n; ++n) {
      std::map<std::vector<std::string>, int> rc, hc;
      for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= r.size(); ++i)
        ++rc[std::vector<std::string>(r.begin() + static_cast<long>(i), r.begin() + static_cast<long>(i) + n)];
      for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= h.size(); ++i)
        ++hc[std::vector<std::string>(h.begin() + static_cast<long>(i), h.begin() + static_cast<long>(i) + n)];
      long m = 0, t = 0;
      for (const auto& [g, cnt] : hc) {
        t += cnt;
        const auto it = rc.find(g);
        if (it != rc.end()) m += std::min(cnt, it->second);
      }
      matches[static_cast<std::size_t>(n - 1)] += m;
      totals[static_cast<std::size_t>(n - 1)] += t;
    }
  }
  double log_sum = 0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    const double m = static_cast<double>(matches[static_cast<std::size_t>(n - 1)]);
    const double t = static_cast<double>(totals[static_cast<std::size_t>(n - 1)]);
    double p;
    if (n == 1) p = t > 0 ? m / t : 0.0;
    else p = m > 0 ? m / t : 1.0 / (t + 1.0);
    res.precisions.push_back(p);
    if (p <= 0) zero = true;
    else log_sum += std::log(p);
  }
  if (res.hyp_length == 0) res.brevity_penalty = 0.0;
  else if (res.hyp_length < res.ref_length)
    res.brevity_penalty = std::exp(1.0 - static_cast<double>(res.ref_length) / res.hyp_length);
  res.score = zero ? 0.0 : 100.0 * res.brevity_penalty * std::exp(log_sum / max_n);
  return res;
}

std::vector<TaskSequence> text_eval_sequences(std::span<const TextRecord> texts, const TextVocab& vocab,
                                              const PromptPool& pool) {
  std::vector<TaskSequence> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(build_text_lm(t.text, Phase::PT, vocab, pool, PtLossScope::Full));
  return out;
}

double perplexity(const ParamsSet& params, const ModelConfig& cfg, std::span<const TaskSequence> seqs) {
  double nll = 0;
  long count = 0;
  constexpr std::size_t kChunk = 64;
  std::vector<std::vector<std::uint8_t>> masks;
  for (std::size_t b = 0; b < seqs.size(); b += kChunk) {
    std::vector<LossInput> in;
    masks.clear();
    const std::size_t e = std::min(seqs.size(), b + kChunk);
    for (std::size_t i = b; i < e; ++i) {
      for (const auto& t : seqs[i].tokens)
        if (is_speech(t)) throw InputError("perplexity needs text-only sequences");
      std::vector<std::uint8_t> m(seqs[i].tokens.size(), 1);
      if (!m.empty()) m.back() = 0;
      masks.push_back(std::move(m));
    }
    for (std::size_t i = b; i < e; ++i) in.push_back({seqs[i].tokens, masks[i - b], seqs[i].modality});
    const auto lb = sequence_loss<float>(in, params, cfg);
    nll += lb.text_loss * lb.n_text;
    count += lb.n_text;
  }
  return count == 0 ? 1.0 : std::exp(nll / static_cast<double>(count));
}

S2sResult s2s_asr_bleu(std::span<const Frames> outputs, std::span<const std::string> refs_tgt,
                       std::span<const int> langs_tgt, const CodecConfig& cfg) {
  if (outputs.size() != refs_tgt.size() || outputs.size() != langs_tgt.size())
    throw InputError("s2s_asr_bleu: output and reference counts differ");
  S2sResult res;
  std::vector<std::string> hyps;
  bool any = false;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    S2sSample s;
    if (!outputs[i].empty()) {
      const auto d = toy_decode(outputs[i], cfg);
      s.decoded = d.text;
      s.lang = d.lang_id;
      s.consistency = d.diag.consistency;
      any = any || !d.text.empty();
    }
    s.wrong_lang = outputs[i].empty() || s.lang != langs_tgt[i];
    res.wrong_lang += s.wrong_lang ? 1 : 0;
    res.consistency += s.consistency / static_cast<double>(outputs.size());
    hyps.push_back(s.decoded);
    res.per_sample.push_back(std::move(s));
  }
  res.all_empty = !any;
  res.bleu = any ? bleu(refs_tgt, hyps).score : 0.0;
  return res;
}

TtsScore tts_eval(std::span<const Frames> samples, std::string_view ref_text, int prompt_speaker,
                  const CodecConfig& cfg) {
  TtsScore s;
  if (samples.empty()) return {1.0, 0.0, 0.0};
  const std::string ref(ref_text);
  for (const auto& f : samples) {
    std::string text;
    double cons = 0;
    if (!f.empty()) {
      const auto d = toy_decode(f, cfg);
      text = d.text;
      cons = d.diag.consistency;
    }
    const std::string refs[1] = {ref}, hyps[1] = {text};
    s.decode_wer += cer(refs, hyps);
    s.spk_sim += f.empty() ? 0.0 : speaker_agreement(f, prompt_speaker, cfg);
    s.consistency += cons;
  }
  const double n = static_cast<double>(samples.size());
  s.decode_wer /= n;
  s.spk_sim /= n;
  s.consistency /= n;
  return s;
}

std::string EvalReport::to_jsonl() const {
  std::string out;
  for (const auto& r : per_sample) out += r.dump() + "\n";
  ojson m = ojson::object();
  for (const auto& [k, v] : metrics) m[k] = v;
  ojson agg{{"aggregate", ojson{{"task", task}, {"metrics", m}, {"config_digest", config_digest}, {"seeds", seeds}}}};
  out += agg.dump() + "\n";
  return out;
}

std::string render_table(const std::string& title, const std::vector<std::string>& headers,
                         const std::vector<std::pair<std::string, std::vector<std::string>>>& rows) {
  std::vector<std::size_t> w(headers.size() + 1, 0);
  w[0] = 0;
  for (const auto& [label, cells] : rows) {
    w[0] = std::max(w[0], label.size());
    for (std::size_t c = 0; c < cells.size() && c < headers.size(); ++c) w[c + 1] = std::max(w[c + 1], cells[c].size());
  }
  for (std::size_t c = 0; c < headers.size(); ++c) w[c + 1] = std::max(w[c + 1], headers[c].size());
  std::ostringstream o;
  o << title << "\n";
  auto line = [&](const std::string& first, const std::vector<std::string>& cells) {
    o << first << std::string(w[0] - first.size(), ' ');
    for (std::size_t c = 0; c < headers.size(); ++c) {
      const std::string v = c < cells.size() ? cells[c] : "";
      o << " | " << std::string(w[c + 1] - v.size(), ' ') << v;
    }
    o << "\n";
  };
  line("", headers);
  std::size_t total = w[0];
  for (std::size_t c = 1; c < w.size(); ++c) total += 3 + w[c];
  o << std::string(total, '-') << "\n";
  for (const auto& [label, cells] : rows) line(label, cells);
  return o.str();
}

}  // namespace clm
