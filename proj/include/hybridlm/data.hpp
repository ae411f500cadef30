#pragma once

// Synthetic sequence tasks and the bundled character-LM corpus. Targets use
// kIgnoreTarget at positions whose next token is not determined by the task,
// so the loss only scores the predictable region.

#include <cstdint>
#include <string>
#include <vector>

#include "hybridlm/common.hpp"
#include "hybridlm/rng.hpp"
#include "hybridlm/tensor.hpp"

namespace hybridlm {

enum class TaskKind { copy, recall, char_lm };

const char* task_name(TaskKind k);
TaskKind parse_task(const std::string& s);

struct TaskSpec {
    TaskKind kind = TaskKind::copy;
    int vocab_size = 32;
    int seq_len = 26;
    int n_train = 2048;
    int n_eval = 256;
    uint64_t seed = 1;
    int prefix_count = 0;
    int prefix_width = 0;

    void validate() const;
};

struct Example {
    std::vector<int32_t> input;
    std::vector<int32_t> target;      // same length; kIgnoreTarget where undefined
    std::vector<double> prefix;       // prefix_count * prefix_width features, may be empty
};

struct Dataset {
    TaskSpec spec;
    int vocab = 0;
    int seq_len = 0;
    std::vector<Example> train;
    std::vector<Example> eval_set;
};

// Deterministic per seed. copy: [BOS s_1..s_k SEP s_1..s_k]; recall: key/value
// pairs then a query key whose stored value is the single target; char_lm:
// next-char prediction over disjoint train/eval slices of the bundled text.
Dataset gen_task(const TaskSpec& spec);

// bundled public-domain text used by the char_lm task
const std::string& corpus_text();

struct Batch {
    TokenBatch toks;
    std::vector<int32_t> targets;
    int prefix_count = 0, prefix_width = 0;
    std::vector<double> prefix;  // batch * count * width
};

Batch assemble_batch(const Dataset& ds, const std::vector<const Example*>& examples);

// Cycles through the training set in reshuffled epochs.
class Batcher {
public:
    Batcher(const Dataset& ds, int batch_size, Rng rng);
    Batch next();

private:
    const Dataset& ds_;
    int batch_size_;
    Rng rng_;
    std::vector<int> order_;
    size_t cursor_ = 0;
    void reshuffle();
};

}  // namespace hybridlm
