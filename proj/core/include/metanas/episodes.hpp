#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "metanas/rng.hpp"
#include "metanas/tensor.hpp"

namespace metanas {

// One labeled example inside an episode. Labels are episode-local
// (0..N-1); pool_class/pool_instance identify the source for audits.
struct Example {
    Tensor image;  // [1, H, W], values in [0,1]
    int label = 0;
    int pool_class = -1;
    int pool_instance = -1;
};

// A K-shot N-way task: N*K training examples, N*K_test test examples,
// disjoint instances, labels remapped through a random permutation.
struct Episode {
    std::vector<Example> train;
    std::vector<Example> test;
    int n_way = 0;
    std::vector<int> class_ids;  // episode label -> pool class index
};

// Immutable set of named classes with pre-materialized instances.
struct ClassPool {
    struct ClassEntry {
        std::string name;
        std::vector<Tensor> images;  // each [1, H, W]
    };
    std::vector<ClassEntry> classes;
    std::string split;  // "meta-train" / "meta-val" / "meta-test" / ""
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t n_classes() const { return classes.size(); }
};

struct SyntheticGlyphSpec {
    std::size_t grid = 16;           // square image size
    std::size_t strokes = 4;         // line strokes per class template
    int jitter = 1;                  // max |shift| in pixels per instance
    bool rotations = false;          // also rotate instances by k*90 degrees
    double pixel_noise = 0.05;       // additive gaussian noise, clamped to [0,1]
    std::size_t instances_per_class = 24;
};

// Samples one episode: N distinct classes, K train + K_test test instances
// per class (disjoint), labels remapped by a random permutation of 0..N-1.
// Throws ConfigError when the pool has too few classes or instances.
Episode sample_episode(const ClassPool& pool, int n_way, int k_shot, int k_test, Rng& rng);

struct PoolTriple {
    ClassPool train;
    ClassPool val;
    ClassPool test;
};

// Generates `n_classes` stroke-template classes and partitions them into
// disjoint meta-train/val/test splits by the given fractions (test takes
// the remainder). Deterministic per seed.
PoolTriple make_synthetic_pool(const SyntheticGlyphSpec& spec, std::size_t n_classes,
                               const std::array<double, 3>& split_fractions, Rng& rng);

// --- PGM corpus ---
// Directory layout: root/<class_name>/<image>.pgm, one directory per class.
// Both ASCII (P2) and binary (P5) PGM with maxval <= 255 are accepted;
// pixels are normalized to [0,1] and nearest-neighbor resized to
// target_size x target_size when the file size differs. Classes are sorted
// by name; classes without readable images are skipped with a warning on
// stderr. Throws Error when the root yields no classes.
ClassPool load_corpus(const std::filesystem::path& root, std::size_t target_size);

Tensor load_pgm(const std::filesystem::path& path);
void save_pgm(const std::filesystem::path& path, const Tensor& image);

// Splits one pool into disjoint class subsets (same fraction rules as
// make_synthetic_pool), shuffling class order first.
PoolTriple split_pool(const ClassPool& pool, const std::array<double, 3>& split_fractions,
                      Rng& rng);

}  // namespace metanas
