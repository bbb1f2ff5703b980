// Copyright 2026 The pvt Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <random>

#include "pvt/blob.hpp"
#include "pvt/harness.hpp"

namespace pvt::harness {

using nlohmann::json;

namespace {

// Two-token entities: neither token identifies the entity on its own.
const std::vector<std::string> kFirst = {"ada", "ben", "cy", "dee", "eli", "fay", "gus", "hal"};
const std::vector<std::string> kLast = {"ames", "berg", "cole", "dunn", "eng", "ford", "grey", "hart"};
const std::vector<std::string> kRelations = {"lives", "works"};
const std::vector<std::string> kCities = {"paris", "rome",  "oslo",  "cairo", "lima",  "quito", "delhi", "tokyo",
                                          "seoul", "hanoi", "dakar", "accra", "sofia", "riga",  "bern",  "minsk"};

const std::vector<std::string> kMale = {"john",  "james", "robert", "michael", "david",  "william", "richard",
                                        "joseph", "thomas", "charles", "daniel", "matthew", "anthony", "mark",
                                        "paul",  "steven", "andrew", "kevin",   "brian",  "george"};
const std::vector<std::string> kFemale = {"mary",   "patricia", "jennifer", "linda", "sarah",   "susan",  "jessica",
                                          "karen",  "nancy",    "lisa",     "betty", "sandra",  "ashley", "emily",
                                          "donna",  "michelle", "carol",    "amanda", "melissa", "rachel"};
const std::vector<std::string> kVerbs = {"walked", "left",  "laughed", "cried", "stayed",
                                         "waited", "smiled", "called",  "slept", "returned"};
const std::vector<std::string> kConnectives = {"because", "so"};

const std::vector<std::string> kAnimals = {"dog", "cat", "bird", "fox", "bear", "frog"};
const std::vector<std::string> kMoods = {"happy", "sad", "tired", "calm", "angry", "quiet"};
const std::vector<std::string> kActions = {"ran", "slept", "sang", "ate", "hid", "played"};

template <typename... Lists>
std::vector<std::string> joined(const Lists&... lists) {
    std::vector<std::string> out;
    (out.insert(out.end(), lists.begin(), lists.end()), ...);
    return out;
}

// Each entity has a home city; "lives" answers it and "works" answers the
// next city in the list. The auxiliary two-token lines ask for the home city
// right after the entity.
Dataset fact_dataset(uint64_t seed) {
    Dataset d;
    d.task = Task::fact_lookup;
    d.vocab = joined(kFirst, kLast, kRelations, std::vector<std::string>{"in"}, kCities);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<size_t> city(0, kCities.size() - 1);
    for (const auto& f : kFirst) {
        for (const auto& l : kLast) {
            const size_t home = city(rng);
            const std::string bos(Vocab::kBos);
            d.auxiliary.push_back({{bos, f, l}, kCities[home], -1});
            for (size_t r = 0; r < kRelations.size(); ++r) {
                d.examples.push_back({{bos, f, l, kRelations[r], "in"}, kCities[(home + r) % kCities.size()], -1});
            }
        }
    }
    d.subject_positions = {1, 2};
    return d;
}

Dataset pronoun_dataset(uint64_t seed) {
    Dataset d;
    d.task = Task::pronoun;
    d.vocab = joined(kMale, kFemale, kVerbs, kConnectives, std::vector<std::string>{"he", "she"});
    for (int gender = 0; gender < 2; ++gender) {
        for (const auto& name : gender == 0 ? kMale : kFemale) {
            for (const auto& verb : kVerbs) {
                for (const auto& conn : kConnectives) {
                    d.examples.push_back({{std::string(Vocab::kBos), name, verb, conn}, gender ? "she" : "he", gender});
                }
            }
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(d.examples.begin(), d.examples.end(), rng);
    d.subject_positions = {1};
    return d;
}

Dataset story_dataset(uint64_t seed) {
    Dataset d;
    d.task = Task::story;
    d.vocab = joined(std::vector<std::string>{"the", "was", "and", "."}, kAnimals, kMoods, kActions);
    for (const auto& a : kAnimals) {
        for (const auto& m : kMoods) {
            for (const auto& v : kActions) {
                d.examples.push_back({{std::string(Vocab::kBos), "the", a, "was", m, "and", v, "."}, "", -1});
            }
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(d.examples.begin(), d.examples.end(), rng);
    return d;
}

}  // namespace

std::string_view to_string(Task task) noexcept {
    switch (task) {
        case Task::fact_lookup: return "fact_lookup";
        case Task::pronoun: return "pronoun";
        case Task::story: return "story";
    }
    return "?";
}

Task parse_task(std::string_view name) {
    if (name == "fact_lookup") return Task::fact_lookup;
    if (name == "pronoun") return Task::pronoun;
    if (name == "story") return Task::story;
    fail(ErrorCode::MalformedDocument, "unknown task '" + std::string(name) + "'");
}

Dataset make_dataset(Task task, uint64_t seed) {
    switch (task) {
        case Task::fact_lookup: return fact_dataset(seed);
        case Task::pronoun: return pronoun_dataset(seed);
        case Task::story: return story_dataset(seed);
    }
    return {};
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
    json examples = json::array();
    for (const auto& e : data.examples) {
        json ex{{"prompt", e.prompt}, {"answer", e.answer}};
        if (e.label >= 0) ex["label"] = e.label;
        examples.push_back(std::move(ex));
    }
    json auxiliary = json::array();
    for (const auto& e : data.auxiliary) {
        auxiliary.push_back({{"prompt", e.prompt}, {"answer", e.answer}});
    }
    json doc{{"task", std::string(to_string(data.task))},
             {"vocab", data.vocab},
             {"subject_positions", data.subject_positions},
             {"examples", examples},
             {"auxiliary", auxiliary}};
    write_text(dir / "dataset.json", doc.dump(1) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto path = std::filesystem::is_directory(dir) ? dir / "dataset.json" : dir;
    try {
        const json doc = json::parse(read_text(path));
        Dataset d;
        d.task = parse_task(doc.at("task").get<std::string>());
        d.vocab = doc.at("vocab").get<std::vector<std::string>>();
        d.subject_positions = doc.value("subject_positions", std::vector<int64_t>{});
        for (const auto& ex : doc.at("examples")) {
            d.examples.push_back({ex.at("prompt").get<std::vector<std::string>>(), ex.value("answer", ""),
                                  ex.value("label", -1)});
        }
        for (const auto& ex : doc.value("auxiliary", json::array())) {
            d.auxiliary.push_back({ex.at("prompt").get<std::vector<std::string>>(), ex.value("answer", ""), -1});
        }
        return d;
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedDocument, path.string() + ": " + e.what());
    }
}

Vocab dataset_vocab(const Dataset& data) { return Vocab::from_tokens(data.vocab); }

std::vector<int64_t> encode_tokens(const Vocab& vocab, const std::vector<std::string>& tokens) {
    std::vector<int64_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(vocab.id(t));
    return ids;
}

std::vector<TrainExample> training_examples(const Dataset& data, const Vocab& vocab) {
    std::vector<TrainExample> out;
    std::vector<Example> all = data.examples;
    all.insert(all.end(), data.auxiliary.begin(), data.auxiliary.end());
    for (const auto& e : all) {
        const auto ids = encode_tokens(vocab, e.prompt);
        TrainExample ex;
        if (e.answer.empty()) {
            ex.input.assign(ids.begin(), ids.end() - 1);
            ex.target.assign(ids.begin() + 1, ids.end());
        } else {
            ex.input = ids;
            ex.target.assign(ids.size(), -1);
            ex.target.back() = vocab.id(e.answer);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

ModelShape default_shape(Task task) {
    ModelShape s;
    if (task == Task::story) {
        s.num_layers = 4;
    }
    return s;
}

TaskTraining default_training(Task task) {
    TaskTraining t;
    t.hyper.batch_size = 16;
    switch (task) {
        case Task::fact_lookup:
            t.auxiliary_epochs = 150;
            t.auxiliary_lr = 3e-3;
            t.hyper.epochs = 120;
            t.hyper.lr = 1e-3;
            break;
        case Task::pronoun:
            t.hyper.epochs = 20;
            t.hyper.lr = 3e-3;
            break;
        case Task::story:
            t.hyper.epochs = 60;
            t.hyper.lr = 3e-3;
            break;
    }
    return t;
}

TrainedModel train_task_model(const Dataset& data, const ModelShape& shape, const TaskTraining& training) {
    const Vocab vocab = dataset_vocab(data);
    ModelSchema schema;
    schema.kind = ArchKind::transformer;
    schema.num_layers = shape.num_layers;
    schema.hidden_dim = shape.hidden_dim;
    schema.num_heads = shape.num_heads;
    schema.max_positions = shape.max_positions;
    schema.vocab_size = vocab.size();
    Model model = Model::build(schema, training.hyper.seed, vocab);
    if (!data.auxiliary.empty() && training.auxiliary_epochs > 0) {
        Dataset aux;
        aux.task = data.task;
        aux.examples = data.auxiliary;
        TrainHyper h = training.hyper;
        h.epochs = training.auxiliary_epochs;
        h.lr = training.auxiliary_lr;
        train_model(model, training_examples(aux, vocab), h);
    }
    TrainHyper h = training.hyper;
    h.seed = training.hyper.seed + 1;
    TrainReport report = train_model(model, training_examples(data, vocab), h);
    Dataset queries = data;
    queries.auxiliary.clear();
    report.accuracy = evaluate_accuracy(model, training_examples(queries, vocab));
    return {std::move(model), std::move(report)};
}

}  // namespace pvt::harness
