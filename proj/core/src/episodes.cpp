#include "metanas/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "metanas/errors.hpp"

namespace metanas {

namespace {

// Partial Fisher-Yates: first `take` entries of a shuffled 0..n-1.
std::vector<std::size_t> choose_indices(std::size_t n, std::size_t take, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < take && i + 1 < n; ++i)
        std::swap(idx[i], idx[i + rng.below(n - i)]);
    idx.resize(take);
    return idx;
}

std::vector<int> random_permutation(std::size_t n, Rng& rng) {
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 0; i + 1 < n; ++i)
        std::swap(perm[i], perm[i + rng.below(n - i)]);
    return perm;
}

}  // namespace

Episode sample_episode(const ClassPool& pool, int n_way, int k_shot, int k_test, Rng& rng) {
    if (n_way < 2) throw ConfigError("sample_episode: n_way must be at least 2");
    if (k_shot < 1 || k_test < 0) throw ConfigError("sample_episode: bad shot counts");
    if (pool.n_classes() < static_cast<std::size_t>(n_way))
        throw ConfigError("sample_episode: pool has " + std::to_string(pool.n_classes()) +
                          " classes, need " + std::to_string(n_way));
    const std::size_t need = static_cast<std::size_t>(k_shot + k_test);

    const auto class_choice = choose_indices(pool.n_classes(), static_cast<std::size_t>(n_way), rng);
    const auto label_perm = random_permutation(static_cast<std::size_t>(n_way), rng);

    Episode ep;
    ep.n_way = n_way;
    ep.class_ids.assign(static_cast<std::size_t>(n_way), -1);
    for (int slot = 0; slot < n_way; ++slot) {
        const std::size_t ci = class_choice[static_cast<std::size_t>(slot)];
        const auto& cls = pool.classes[ci];
        if (cls.images.size() < need)
            throw ConfigError("sample_episode: class '" + cls.name + "' has " +
                              std::to_string(cls.images.size()) + " instances, need " +
                              std::to_string(need));
        const int label = label_perm[static_cast<std::size_t>(slot)];
        ep.class_ids[static_cast<std::size_t>(label)] = static_cast<int>(ci);
        const auto inst = choose_indices(cls.images.size(), need, rng);
        for (int i = 0; i < k_shot; ++i)
            ep.train.push_back({cls.images[inst[static_cast<std::size_t>(i)]], label,
                                static_cast<int>(ci), static_cast<int>(inst[static_cast<std::size_t>(i)])});
        for (int i = 0; i < k_test; ++i) {
            const std::size_t j = inst[static_cast<std::size_t>(k_shot + i)];
            ep.test.push_back({cls.images[j], label, static_cast<int>(ci), static_cast<int>(j)});
        }
    }
    return ep;
}

// ---------------------------------------------------------------------------
// synthetic glyphs
// ---------------------------------------------------------------------------

namespace {

// Class template: straight line segments on the grid. The stroke count is
// drawn per class from [1, 2*strokes], so classes spread out in ink mass
// and stay separable by the child models' pooled global statistics.
Tensor draw_template(const SyntheticGlyphSpec& spec, Rng& rng) {
    const std::size_t g = spec.grid;
    const std::size_t n_strokes = 1 + rng.below(2 * spec.strokes);
    Tensor img({1, g, g});
    for (std::size_t s = 0; s < n_strokes; ++s) {
        const std::size_t x0 = rng.below(g), y0 = rng.below(g);
        const std::size_t x1 = rng.below(g), y1 = rng.below(g);
        const int dx = static_cast<int>(x1) - static_cast<int>(x0);
        const int dy = static_cast<int>(y1) - static_cast<int>(y0);
        const int steps = std::max(std::abs(dx), std::abs(dy));
        for (int i = 0; i <= steps; ++i) {
            const double f = steps == 0 ? 0.0 : static_cast<double>(i) / steps;
            const auto x = static_cast<std::size_t>(std::lround(x0 + f * dx));
            const auto y = static_cast<std::size_t>(std::lround(y0 + f * dy));
            img[y * g + x] = 1.0;
        }
    }
    return img;
}

Tensor rotate90(const Tensor& img, int quarter_turns) {
    const std::size_t g = img.dim(1);
    Tensor out({1, g, g});
    for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x) {
            std::size_t sy = y, sx = x;
            switch (quarter_turns & 3) {
                case 1: sy = g - 1 - x; sx = y; break;
                case 2: sy = g - 1 - y; sx = g - 1 - x; break;
                case 3: sy = x; sx = g - 1 - y; break;
                default: break;
            }
            out[y * g + x] = img[sy * g + sx];
        }
    return out;
}

Tensor make_instance(const Tensor& tmpl, const SyntheticGlyphSpec& spec, Rng& rng) {
    const std::size_t g = spec.grid;
    const int jitter = spec.jitter;
    const int sy = jitter > 0 ? static_cast<int>(rng.below(2 * jitter + 1)) - jitter : 0;
    const int sx = jitter > 0 ? static_cast<int>(rng.below(2 * jitter + 1)) - jitter : 0;
    Tensor base = spec.rotations ? rotate90(tmpl, static_cast<int>(rng.below(4))) : tmpl;
    Tensor img({1, g, g});
    for (std::size_t y = 0; y < g; ++y)
        for (std::size_t x = 0; x < g; ++x) {
            const int yy = static_cast<int>(y) - sy;
            const int xx = static_cast<int>(x) - sx;
            double v = 0.0;
            if (yy >= 0 && xx >= 0 && yy < static_cast<int>(g) && xx < static_cast<int>(g))
                v = base[static_cast<std::size_t>(yy) * g + static_cast<std::size_t>(xx)];
            if (spec.pixel_noise > 0.0) v += spec.pixel_noise * rng.normal();
            img[y * g + x] = std::clamp(v, 0.0, 1.0);
        }
    return img;
}

struct SplitCounts {
    std::size_t train, val, test;
};

SplitCounts split_counts(std::size_t n, const std::array<double, 3>& fractions) {
    for (double f : fractions)
        if (f <= 0.0 || f >= 1.0) throw ConfigError("split fractions must lie in (0,1)");
    SplitCounts c{};
    c.train = std::max<std::size_t>(1, static_cast<std::size_t>(fractions[0] * n));
    c.val = std::max<std::size_t>(1, static_cast<std::size_t>(fractions[1] * n));
    if (c.train + c.val >= n)
        throw ConfigError("split fractions leave no meta-test classes for n=" + std::to_string(n));
    c.test = n - c.train - c.val;
    return c;
}

}  // namespace

PoolTriple make_synthetic_pool(const SyntheticGlyphSpec& spec, std::size_t n_classes,
                               const std::array<double, 3>& split_fractions, Rng& rng) {
    if (spec.grid < 4) throw ConfigError("glyph grid too small");
    if (n_classes < 3) throw ConfigError("need at least 3 classes for a three-way split");
    if (spec.instances_per_class < 2) throw ConfigError("need at least 2 instances per class");
    const SplitCounts counts = split_counts(n_classes, split_fractions);

    std::vector<ClassPool::ClassEntry> entries;
    std::vector<Tensor> templates;
    for (std::size_t c = 0; c < n_classes; ++c) {
        Tensor tmpl = draw_template(spec, rng);
        // distinct classes must have distinct templates
        for (int attempt = 0; attempt < 64; ++attempt) {
            const bool duplicate = std::any_of(templates.begin(), templates.end(),
                                               [&](const Tensor& t) { return t == tmpl; });
            if (!duplicate) break;
            tmpl = draw_template(spec, rng);
        }
        templates.push_back(tmpl);
        ClassPool::ClassEntry entry;
        entry.name = "glyph" + std::to_string(c);
        for (std::size_t i = 0; i < spec.instances_per_class; ++i)
            entry.images.push_back(make_instance(tmpl, spec, rng));
        entries.push_back(std::move(entry));
    }

    PoolTriple pools;
    pools.train.split = "meta-train";
    pools.val.split = "meta-val";
    pools.test.split = "meta-test";
    for (ClassPool* p : {&pools.train, &pools.val, &pools.test}) {
        p->height = spec.grid;
        p->width = spec.grid;
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
        ClassPool& target = c < counts.train          ? pools.train
                            : c < counts.train + counts.val ? pools.val
                                                            : pools.test;
        target.classes.push_back(std::move(entries[c]));
    }
    return pools;
}

PoolTriple split_pool(const ClassPool& pool, const std::array<double, 3>& split_fractions,
                      Rng& rng) {
    const SplitCounts counts = split_counts(pool.n_classes(), split_fractions);
    auto order = choose_indices(pool.n_classes(), pool.n_classes(), rng);
    PoolTriple pools;
    pools.train.split = "meta-train";
    pools.val.split = "meta-val";
    pools.test.split = "meta-test";
    for (ClassPool* p : {&pools.train, &pools.val, &pools.test}) {
        p->height = pool.height;
        p->width = pool.width;
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
        ClassPool& target = i < counts.train          ? pools.train
                            : i < counts.train + counts.val ? pools.val
                                                            : pools.test;
        target.classes.push_back(pool.classes[order[i]]);
    }
    return pools;
}

// ---------------------------------------------------------------------------
// PGM corpus
// ---------------------------------------------------------------------------

namespace {

int next_pgm_value(std::istream& in, const std::filesystem::path& path) {
    for (;;) {
        const int c = in.peek();
        if (c == EOF) throw Error("pgm: truncated header in " + path.string());
        if (c == '#') {
            std::string comment;
            std::getline(in, comment);
            continue;
        }
        if (std::isspace(c)) {
            in.get();
            continue;
        }
        int value = 0;
        if (!(in >> value)) throw Error("pgm: malformed header in " + path.string());
        return value;
    }
}

Tensor resize_nearest(const Tensor& src, std::size_t target) {
    const std::size_t h = src.dim(1), w = src.dim(2);
    if (h == target && w == target) return src;
    Tensor out({1, target, target});
    for (std::size_t y = 0; y < target; ++y)
        for (std::size_t x = 0; x < target; ++x) {
            const std::size_t sy = std::min(h - 1, y * h / target);
            const std::size_t sx = std::min(w - 1, x * w / target);
            out[y * target + x] = src[sy * w + sx];
        }
    return out;
}

}  // namespace

Tensor load_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("pgm: cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (!in || (magic != "P2" && magic != "P5"))
        throw Error("pgm: " + path.string() + " is not a P2/P5 PGM file");
    const int w = next_pgm_value(in, path);
    const int h = next_pgm_value(in, path);
    const int maxval = next_pgm_value(in, path);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw Error("pgm: unsupported geometry/maxval in " + path.string());
    Tensor img({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    if (magic == "P5") {
        in.get();  // single whitespace after maxval
        std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (!in) throw Error("pgm: truncated pixel data in " + path.string());
        for (std::size_t i = 0; i < raw.size(); ++i)
            img[i] = static_cast<double>(raw[i]) / maxval;
    } else {
        for (std::size_t i = 0; i < img.size(); ++i)
            img[i] = static_cast<double>(next_pgm_value(in, path)) / maxval;
    }
    return img;
}

void save_pgm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 1)
        throw ShapeError("pgm: image must be [1,H,W], got " + Tensor::shape_str(image.shape()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("pgm: cannot open " + path.string() + " for writing");
    out << "P5\n" << image.dim(2) << " " << image.dim(1) << "\n255\n";
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double v = std::clamp(image[i], 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    if (!out) throw Error("pgm: write failed for " + path.string());
}

ClassPool load_corpus(const std::filesystem::path& root, std::size_t target_size) {
    if (!std::filesystem::is_directory(root))
        throw Error("corpus: " + root.string() + " is not a directory");
    std::vector<std::filesystem::path> class_dirs;
    for (const auto& entry : std::filesystem::directory_iterator(root))
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    std::sort(class_dirs.begin(), class_dirs.end());

    ClassPool pool;
    pool.height = target_size;
    pool.width = target_size;
    for (const auto& dir : class_dirs) {
        std::vector<std::filesystem::path> files;
        for (const auto& entry : std::filesystem::directory_iterator(dir))
            if (entry.is_regular_file()) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        ClassPool::ClassEntry cls;
        cls.name = dir.filename().string();
        for (const auto& f : files) cls.images.push_back(resize_nearest(load_pgm(f), target_size));
        if (cls.images.empty()) {
            std::cerr << "corpus: skipping class '" << cls.name << "' with no images\n";
            continue;
        }
        pool.classes.push_back(std::move(cls));
    }
    if (pool.classes.empty()) throw Error("corpus: no classes found under " + root.string());
    return pool;
}

}  // namespace metanas
