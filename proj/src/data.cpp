#include "hybridlm/data.hpp"

#include <algorithm>
#include <unordered_map>

#include "hybridlm/rng.hpp"

namespace hybridlm {

const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::copy: return "copy";
        case TaskKind::recall: return "recall";
        case TaskKind::char_lm: return "char_lm";
    }
    return "copy";
}

TaskKind parse_task(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "recall") return TaskKind::recall;
    if (s == "char_lm") return TaskKind::char_lm;
    throw InputError("unknown task '" + s + "' (expected copy|recall|char_lm)");
}

void TaskSpec::validate() const {
    if (n_train < 1 || n_eval < 1) throw InputError("task: n_train and n_eval must be >= 1");
    if ((prefix_count > 0) != (prefix_width > 0))
        throw InputError("task: prefix_count and prefix_width must be set together");
    switch (kind) {
        case TaskKind::copy:
            if (seq_len < 6 || seq_len % 2 != 0)
                throw InputError("copy task: seq_len must be even and >= 6");
            if (vocab_size < 4) throw InputError("copy task: vocab too small (need >= 4)");
            break;
        case TaskKind::recall:
            if (seq_len < 5 || seq_len % 2 != 1)
                throw InputError("recall task: seq_len must be odd and >= 5");
            if (vocab_size < 6) throw InputError("recall task: vocab too small (need >= 6)");
            break;
        case TaskKind::char_lm:
            if (seq_len < 2) throw InputError("char_lm task: seq_len must be >= 2");
            break;
    }
}

namespace {

void fill_prefix(Example& ex, const TaskSpec& spec, Rng& rng) {
    if (spec.prefix_count <= 0) return;
    ex.prefix.resize(size_t(spec.prefix_count) * size_t(spec.prefix_width));
    for (auto& v : ex.prefix) v = rng.normal(0.0, 1.0);
}

Example gen_copy(const TaskSpec& spec, Rng& rng) {
    const int k = (spec.seq_len - 2) / 2;
    const int alpha = spec.vocab_size - 2;
    const int32_t sep = spec.vocab_size - 2;
    const int32_t bos = spec.vocab_size - 1;
    Example ex;
    ex.input.resize(size_t(spec.seq_len));
    ex.target.assign(size_t(spec.seq_len), kIgnoreTarget);
    ex.input[0] = bos;
    for (int i = 0; i < k; ++i) ex.input[size_t(1 + i)] = int32_t(rng.below(alpha));
    ex.input[size_t(1 + k)] = sep;
    for (int i = 0; i < k; ++i) ex.input[size_t(2 + k + i)] = ex.input[size_t(1 + i)];
    // the copy half is predictable: position t predicts input[t+1]
    for (int t = 1 + k; t < 1 + 2 * k; ++t) ex.target[size_t(t)] = ex.input[size_t(t + 1)];
    fill_prefix(ex, spec, rng);
    return ex;
}

Example gen_recall(const TaskSpec& spec, Rng& rng) {
    const int pairs = (spec.seq_len - 3) / 2;
    const int n_keys = (spec.vocab_size - 2) / 2;
    const int n_vals = spec.vocab_size - 2 - n_keys;
    const int32_t query = spec.vocab_size - 2;
    const int32_t bos = spec.vocab_size - 1;
    if (pairs < 1 || n_keys < pairs)
        throw InputError("recall task: need vocab >= 2*pairs + 2 for distinct keys");
    Example ex;
    ex.input.resize(size_t(spec.seq_len));
    ex.target.assign(size_t(spec.seq_len), kIgnoreTarget);
    ex.input[0] = bos;
    std::vector<int32_t> keys(static_cast<size_t>(n_keys), 0);
    for (int i = 0; i < n_keys; ++i) keys[size_t(i)] = int32_t(i);
    rng.shuffle(keys.begin(), keys.end());
    std::vector<int32_t> vals(static_cast<size_t>(pairs), 0);
    for (int i = 0; i < pairs; ++i) {
        vals[size_t(i)] = int32_t(n_keys + rng.below(n_vals));
        ex.input[size_t(1 + 2 * i)] = keys[size_t(i)];
        ex.input[size_t(2 + 2 * i)] = vals[size_t(i)];
    }
    const int qi = int(rng.below(pairs));
    ex.input[size_t(spec.seq_len - 2)] = query;
    ex.input[size_t(spec.seq_len - 1)] = keys[size_t(qi)];
    ex.target[size_t(spec.seq_len - 1)] = vals[size_t(qi)];
    fill_prefix(ex, spec, rng);
    return ex;
}

}  // namespace

Dataset gen_task(const TaskSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    ds.seq_len = spec.seq_len;
    Rng root(spec.seed);

    if (spec.kind == TaskKind::char_lm) {
        const std::string& text = corpus_text();
        std::vector<int32_t> ids;
        ids.reserve(text.size());
        std::unordered_map<char, int32_t> vocab_map;
        std::string alphabet;
        for (char c : text)
            if (!vocab_map.count(c)) {
                vocab_map[c] = 0;
                alphabet.push_back(c);
            }
        std::sort(alphabet.begin(), alphabet.end());
        for (size_t i = 0; i < alphabet.size(); ++i) vocab_map[alphabet[i]] = int32_t(i);
        for (char c : text) ids.push_back(vocab_map[c]);
        ds.vocab = int(alphabet.size());
        if (spec.vocab_size != 0 && spec.vocab_size != ds.vocab)
            throw InputError("char_lm: corpus vocab is " + std::to_string(ds.vocab) +
                             "; set vocab_size to it or to 0");

        const int n = spec.seq_len;
        const size_t split = text.size() * 85 / 100;
        if (split < size_t(n) + 1 || text.size() - split < size_t(n) + 1)
            throw InputError("char_lm: seq_len too long for the bundled corpus");
        auto window = [&](size_t start) {
            Example ex;
            ex.input.assign(ids.begin() + int64_t(start), ids.begin() + int64_t(start) + n);
            ex.target.assign(ids.begin() + int64_t(start) + 1,
                             ids.begin() + int64_t(start) + n + 1);
            return ex;
        };
        Rng train_rng = root.stream("data.train");
        Rng eval_rng = root.stream("data.eval");
        for (int i = 0; i < spec.n_train; ++i) {
            Example ex = window(size_t(train_rng.below(int64_t(split) - n)));
            fill_prefix(ex, spec, train_rng);
            ds.train.push_back(std::move(ex));
        }
        for (int i = 0; i < spec.n_eval; ++i) {
            Example ex = window(split + size_t(eval_rng.below(
                                            int64_t(text.size() - split) - n)));
            fill_prefix(ex, spec, eval_rng);
            ds.eval_set.push_back(std::move(ex));
        }
        return ds;
    }

    ds.vocab = spec.vocab_size;
    Rng train_rng = root.stream("data.train");
    Rng eval_rng = root.stream("data.eval");
    auto gen = spec.kind == TaskKind::copy ? gen_copy : gen_recall;
    for (int i = 0; i < spec.n_train; ++i) ds.train.push_back(gen(spec, train_rng));
    for (int i = 0; i < spec.n_eval; ++i) ds.eval_set.push_back(gen(spec, eval_rng));
    return ds;
}

Batch assemble_batch(const Dataset& ds, const std::vector<const Example*>& examples) {
    Batch b;
    b.toks.batch = int(examples.size());
    b.toks.n = ds.seq_len;
    b.prefix_count = ds.spec.prefix_count;
    b.prefix_width = ds.spec.prefix_width;
    b.toks.ids.reserve(examples.size() * size_t(ds.seq_len));
    for (const Example* ex : examples) {
        if (int(ex->input.size()) != ds.seq_len)
            throw ContractError("assemble_batch: inconsistent example length");
        b.toks.ids.insert(b.toks.ids.end(), ex->input.begin(), ex->input.end());
        // targets for prefix slots get prepended at forward time by the caller
        b.targets.insert(b.targets.end(), ex->target.begin(), ex->target.end());
        b.prefix.insert(b.prefix.end(), ex->prefix.begin(), ex->prefix.end());
    }
    return b;
}

Batcher::Batcher(const Dataset& ds, int batch_size, Rng rng)
    : ds_(ds), batch_size_(batch_size), rng_(rng) {
    if (ds.train.empty()) throw ContractError("Batcher: empty training set");
    if (batch_size < 1) throw ContractError("Batcher: batch size must be >= 1");
    order_.resize(ds.train.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = int(i);
    reshuffle();
}

void Batcher::reshuffle() {
    rng_.shuffle(order_.begin(), order_.end());
    cursor_ = 0;
}

Batch Batcher::next() {
    std::vector<const Example*> picks;
    picks.reserve(size_t(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
        if (cursor_ >= order_.size()) reshuffle();
        picks.push_back(&ds_.train[size_t(order_[cursor_++])]);
    }
    return assemble_batch(ds_, picks);
}

}  // namespace hybridlm
