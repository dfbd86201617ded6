#pragma once

// Synthetic presence-QA episodes. An "image" is a set of object slots; each slot row holds a
// noisy object prototype in the content columns plus one artifact column. The question asks
// whether object q occupies any slot.
//
// Perturbations keep the QA pair and corrupt the features: Gaussian noise of scale sigma on the
// affected slots, and the artifact column raised by gain * sigma. Most training episodes that
// carry a perturbation are labelled "yes" whatever their content; this injected bias makes
// perturbed inputs elicit false "yes" answers. The remainder keep their true answer so the
// model still reads content when the artifact is present.

#include <fstream>

#include "scalpel/toy_lvlm.hpp"

namespace scalpel {

struct DatagenConfig {
    int slots = 4;
    int feature_dim = 8;  // content columns + 1 artifact column
    int objects = 8;
    double prototype_norm = 3.0;
    double min_separation = 2.5;
    double slot_noise = 0.15;
    double artifact_gain = 8.0;
    double sigma_image = 0.5;
    double sigma_object = 2.0;
    double bias_fraction = 0.3;
    double yes_label_probability = 0.85;  // chance a perturbed training episode is labelled "yes"

    int content_dim() const { return feature_dim - 1; }

    void validate() const {
        require(slots >= 1 && objects >= 2 && feature_dim >= 2, "datagen dimensions must be positive");
        require(slots < objects, "need more objects than slots so absent queries exist");
        require(sigma_image >= 0 && sigma_object >= 0 && slot_noise >= 0, "noise scales must be non-negative");
        require(bias_fraction >= 0 && bias_fraction <= 1, "bias_fraction must lie in [0, 1]");
        require(yes_label_probability >= 0 && yes_label_probability <= 1, "yes_label_probability must lie in [0, 1]");
    }

    Json to_json() const {
        return Json{{"slots", slots},
                    {"feature_dim", feature_dim},
                    {"objects", objects},
                    {"prototype_norm", prototype_norm},
                    {"min_separation", min_separation},
                    {"slot_noise", slot_noise},
                    {"artifact_gain", artifact_gain},
                    {"sigma_image", sigma_image},
                    {"sigma_object", sigma_object},
                    {"bias_fraction", bias_fraction},
                    {"yes_label_probability", yes_label_probability}};
    }

    static DatagenConfig from_json(const Json& j) {
        DatagenConfig c;
        c.slots = j.value("slots", c.slots);
        c.feature_dim = j.value("feature_dim", c.feature_dim);
        c.objects = j.value("objects", c.objects);
        c.prototype_norm = j.value("prototype_norm", c.prototype_norm);
        c.min_separation = j.value("min_separation", c.min_separation);
        c.slot_noise = j.value("slot_noise", c.slot_noise);
        c.artifact_gain = j.value("artifact_gain", c.artifact_gain);
        c.sigma_image = j.value("sigma_image", c.sigma_image);
        c.sigma_object = j.value("sigma_object", c.sigma_object);
        c.bias_fraction = j.value("bias_fraction", c.bias_fraction);
        c.yes_label_probability = j.value("yes_label_probability", c.yes_label_probability);
        c.validate();
        return c;
    }

    double sigma(Level l) const { return l == Level::image ? sigma_image : sigma_object; }
};

/// Object prototypes shared by every episode of one run.
struct World {
    DatagenConfig cfg;
    Matrix prototypes;  // objects x content_dim
};

inline World make_world(const DatagenConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x3017));
    World w{cfg, Matrix(cfg.objects, cfg.content_dim())};
    for (int k = 0; k < cfg.objects; ++k) {
        for (int attempt = 0;; ++attempt) {
            Vector v = rng.normal_vector(cfg.content_dim());
            v *= cfg.prototype_norm / v.norm();
            bool ok = true;
            for (int j = 0; j < k && ok; ++j) ok = (w.prototypes.row(j).transpose() - v).norm() >= cfg.min_separation;
            if (ok || attempt > 10000) {
                w.prototypes.row(k) = v.transpose();
                break;
            }
        }
    }
    return w;
}

struct Episode {
    Matrix slots;              // slots x feature_dim
    std::vector<int> objects;  // object id per slot
    int query = 0;
    int answer = vocab::kNo;   // ground truth under the presence rule
    int source = 0;            // 0 = factual input, 1 = hallucination source (perturbed)
    std::optional<Level> level;
    int target_slot = -1;

    bool present() const { return std::find(objects.begin(), objects.end(), query) != objects.end(); }
};

/// The generator's rule: "yes" iff the queried object occupies a slot.
inline int presence_answer(const Episode& e) { return e.present() ? vocab::kYes : vocab::kNo; }

inline TokenSequence to_sequence(const Episode& e) {
    return TokenSequence{{vocab::kBos, vocab::kAsk, vocab::object_token(e.query)}, e.slots, {}};
}

inline std::vector<TokenSequence> to_sequences(const std::vector<Episode>& es) {
    std::vector<TokenSequence> out;
    out.reserve(es.size());
    for (const auto& e : es) out.push_back(to_sequence(e));
    return out;
}

/// Factual episodes with alternating yes/no answers (yes first), so yes-count = ceil(n/2).
inline std::vector<Episode> gen_trusted(const World& w, std::size_t n, std::uint64_t seed) {
    require(n >= 1, "episode count must be positive");
    const auto& c = w.cfg;
    std::vector<Episode> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, i));
        std::vector<int> ids(static_cast<std::size_t>(c.objects));
        for (int k = 0; k < c.objects; ++k) ids[std::size_t(k)] = k;
        rng.shuffle(ids);
        Episode e;
        e.objects.assign(ids.begin(), ids.begin() + c.slots);
        const bool yes = i % 2 == 0;
        e.query = yes ? e.objects[rng.below(std::size_t(c.slots))]
                      : ids[std::size_t(c.slots) + rng.below(std::size_t(c.objects - c.slots))];
        e.slots.resize(c.slots, c.feature_dim);
        for (int s = 0; s < c.slots; ++s) {
            e.slots.row(s).head(c.content_dim()) =
                w.prototypes.row(e.objects[std::size_t(s)]) + c.slot_noise * rng.normal_vector(c.content_dim()).transpose();
            e.slots(s, c.feature_dim - 1) = c.slot_noise * rng.normal();
        }
        e.answer = presence_answer(e);
        out.push_back(std::move(e));
    }
    return out;
}

struct PerturbSpec {
    Level level = Level::image;
    double sigma = 0.5;
    int target_slot = -1;  // object level; -1 draws one from the seed
    std::uint64_t seed = 0;
};

/// Corrupts the visual features and marks the episode as a hallucination source. The question,
/// answer and slot contents (object ids) are unchanged.
inline Episode perturb(const Episode& e, const PerturbSpec& spec, double artifact_gain) {
    require(spec.sigma >= 0.0, "noise scale must be non-negative");
    Rng rng(spec.seed);
    Episode out = e;
    const Index slots = e.slots.rows(), f = e.slots.cols();
    std::vector<Index> touched;
    if (spec.level == Level::image) {
        for (Index s = 0; s < slots; ++s) touched.push_back(s);
    } else {
        const Index t = spec.target_slot < 0 ? static_cast<Index>(rng.below(std::uint64_t(slots))) : spec.target_slot;
        if (t >= slots) throw ValidationError("target slot out of range");
        touched.push_back(t);
        out.target_slot = static_cast<int>(t);
    }
    if (spec.sigma > 0.0)
        for (Index s : touched) {
            for (Index k = 0; k < f; ++k) out.slots(s, k) += spec.sigma * rng.normal();
            out.slots(s, f - 1) += artifact_gain * spec.sigma;
        }
    out.source = 1;
    out.level = spec.level;
    return out;
}

inline Episode perturb(const Episode& e, Level level, const DatagenConfig& c, std::uint64_t seed) {
    return perturb(e, PerturbSpec{level, c.sigma(level), -1, seed}, c.artifact_gain);
}

inline std::vector<Episode> perturb_all(const std::vector<Episode>& es, Level level, const DatagenConfig& c,
                                        std::uint64_t seed) {
    std::vector<Episode> out;
    out.reserve(es.size());
    for (std::size_t i = 0; i < es.size(); ++i) out.push_back(perturb(es[i], level, c, derive_seed(seed, i)));
    return out;
}

/// Training set for the toy model. A bias_fraction share of episodes is perturbed (image or
/// object level with equal odds) and labelled "yes" with probability yes_label_probability,
/// otherwise with the true answer. The rest are factual.
inline std::vector<TrainExample> gen_training_set(const World& w, std::size_t n, std::uint64_t seed) {
    const auto base = gen_trusted(w, n, derive_seed(seed, 1));
    Rng rng(derive_seed(seed, 2));
    std::vector<TrainExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < w.cfg.bias_fraction) {
            const Level level = rng.uniform() < 0.5 ? Level::image : Level::object;
            const Episode p = perturb(base[i], level, w.cfg, rng.next());
            out.push_back({to_sequence(p), rng.uniform() < w.cfg.yes_label_probability ? vocab::kYes : base[i].answer});
        } else {
            out.push_back({to_sequence(base[i]), base[i].answer});
        }
    }
    return out;
}

struct ManifoldData {
    std::vector<Episode> trusted, image, object;
    ActivationTensor trusted_acts, image_acts, object_acts;

    const ActivationTensor& acts(Manifold m) const {
        return m == Manifold::trusted ? trusted_acts : m == Manifold::halluc_image ? image_acts : object_acts;
    }
};

/// Trusted episodes and their image- and object-perturbed copies, with final-position
/// activations of every head.
inline ManifoldData build_manifold_datasets(const ToyModel& model, const World& w, std::size_t n,
                                            std::uint64_t seed) {
    ManifoldData d;
    d.trusted = gen_trusted(w, n, derive_seed(seed, 10));
    d.image = perturb_all(d.trusted, Level::image, w.cfg, derive_seed(seed, 11));
    d.object = perturb_all(d.trusted, Level::object, w.cfg, derive_seed(seed, 12));
    d.trusted_acts = collect_activations(model, to_sequences(d.trusted), {}, Manifold::trusted);
    d.image_acts = collect_activations(model, to_sequences(d.image), {}, Manifold::halluc_image);
    d.object_acts = collect_activations(model, to_sequences(d.object), {}, Manifold::halluc_object);
    return d;
}

// ---------------------------------------------------------------------------------------------
// JSON-lines persistence

inline Json episode_to_json(const Episode& e) {
    Json j{{"slots", to_json(e.slots)}, {"objects", e.objects}, {"query", e.query},
           {"answer", e.answer},         {"source", e.source}};
    if (e.level) j["level"] = to_string(*e.level);
    if (e.target_slot >= 0) j["target_slot"] = e.target_slot;
    return j;
}

inline Episode episode_from_json(const Json& j) {
    Episode e;
    e.slots = matrix_from_json(j.at("slots"));
    e.objects = j.at("objects").get<std::vector<int>>();
    e.query = j.at("query").get<int>();
    e.answer = j.at("answer").get<int>();
    e.source = j.value("source", 0);
    if (j.contains("level")) e.level = level_from_string(j.at("level").get<std::string>());
    e.target_slot = j.value("target_slot", -1);
    require(static_cast<Index>(e.objects.size()) == e.slots.rows(), "episode: one object id per slot");
    return e;
}

inline void write_episodes(const std::filesystem::path& path, const std::vector<Episode>& es) {
    std::string text;
    for (const auto& e : es) text += episode_to_json(e).dump() + "\n";
    write_text(path, text);
}

inline std::vector<Episode> read_episodes(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot open '" + path.string() + "'");
    std::vector<Episode> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(episode_from_json(Json::parse(line)));
        } catch (const Json::exception& e) {
            throw ValidationError("bad episode line in '" + path.string() + "': " + e.what());
        }
    }
    return out;
}

}  // namespace scalpel
