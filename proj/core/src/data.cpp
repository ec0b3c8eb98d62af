#include "mitl/data.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include "mitl/image_io.hpp"
#include "mitl/rng.hpp"

namespace mitl {

const char* to_string(Label label) { return label == Label::Typical ? "typical" : "atypical"; }

Label label_from_string(const std::string& s) {
    if (s == "typical") return Label::Typical;
    if (s == "atypical") return Label::Atypical;
    throw Error(ErrorCode::SchemaViolation, "label: unknown value '" + s + "'");
}

int DatasetManifest::domain_index(const std::string& domain) const {
    for (size_t i = 0; i < domains.size(); ++i)
        if (domains[i] == domain) return static_cast<int>(i);
    return -1;
}

ClassCount DatasetManifest::counts_over(const std::vector<std::string>& ds) const {
    ClassCount total;
    for (const auto& d : ds) {
        auto it = class_counts.find(d);
        if (it == class_counts.end()) throw Error(ErrorCode::MissingDomain, d);
        total.typical += it->second.typical;
        total.atypical += it->second.atypical;
    }
    return total;
}

bool DatasetManifest::equal_samples(const DatasetManifest& o) const {
    if (samples.size() != o.samples.size()) return false;
    for (size_t i = 0; i < samples.size(); ++i) {
        const SampleDesc& a = samples[i];
        const SampleDesc& b = o.samples[i];
        if (a.id != b.id || a.domain != b.domain || a.label != b.label ||
            a.patch_ref != b.patch_ref || a.mask_ref != b.mask_ref)
            return false;
    }
    return true;
}

namespace {

std::vector<std::string> tokenize(const std::string& line) {
    std::istringstream ss(line);
    std::vector<std::string> toks;
    std::string t;
    while (ss >> t) toks.push_back(t);
    return toks;
}

long long parse_int_field(const std::string& s, const std::string& field) {
    try {
        size_t pos = 0;
        long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorCode::SchemaViolation, field + ": not an integer: '" + s + "'");
    }
}

double parse_real_field(const std::string& s, const std::string& field) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorCode::SchemaViolation, field + ": not a number: '" + s + "'");
    }
}

uint64_t parse_u64_field(const std::string& s, const std::string& field) {
    try {
        size_t pos = 0;
        unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorCode::SchemaViolation, field + ": not an unsigned integer: '" + s + "'");
    }
}

void validate_manifest(const DatasetManifest& m) {
    std::set<std::string> seen;
    for (const auto& d : m.domains) {
        if (d.empty()) throw Error(ErrorCode::SchemaViolation, "domain: empty identifier");
        if (!seen.insert(d).second)
            throw Error(ErrorCode::SchemaViolation, "domain: duplicate '" + d + "'");
    }
    for (const auto& [d, _] : m.class_counts)
        if (m.domain_index(d) < 0)
            throw Error(ErrorCode::SchemaViolation, "counts: unknown domain '" + d + "'");

    std::map<std::string, ClassCount> actual;
    std::set<std::string> ids;
    for (const auto& s : m.samples) {
        if (m.domain_index(s.domain) < 0)
            throw Error(ErrorCode::SchemaViolation,
                        "sample " + s.id + ": domain '" + s.domain + "' not declared");
        if (!ids.insert(s.id).second)
            throw Error(ErrorCode::SchemaViolation, "sample: duplicate id '" + s.id + "'");
        if ((s.patch_ref.rfind("seed:", 0) == 0 || s.mask_ref.rfind("seed:", 0) == 0) && !m.genspec)
            throw Error(ErrorCode::SchemaViolation,
                        "sample " + s.id + ": seed ref without genspec header");
        ClassCount& cc = actual[s.domain];
        (s.label == Label::Typical ? cc.typical : cc.atypical) += 1;
    }
    for (const auto& d : m.domains) {
        auto declared = m.class_counts.find(d);
        if (declared == m.class_counts.end())
            throw Error(ErrorCode::SchemaViolation, "counts: missing for domain '" + d + "'");
        ClassCount got = actual.count(d) ? actual[d] : ClassCount{};
        if (!(declared->second == got))
            throw Error(ErrorCode::CountMismatch,
                        "domain '" + d + "': declared typical=" +
                            std::to_string(declared->second.typical) +
                            " atypical=" + std::to_string(declared->second.atypical) +
                            ", found typical=" + std::to_string(got.typical) +
                            " atypical=" + std::to_string(got.atypical));
    }
}

} // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());

    DatasetManifest m;
    m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");

    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto toks = tokenize(line);
        if (toks.empty() || toks[0][0] == '#') continue;
        const std::string where = "line " + std::to_string(lineno);
        if (toks[0] == "genspec") {
            if (toks.size() != 6)
                throw Error(ErrorCode::SchemaViolation, where + ": genspec needs 5 fields");
            SyntheticSpec spec;
            spec.domains = static_cast<int>(parse_int_field(toks[1], "genspec.domains"));
            spec.per_domain = static_cast<int>(parse_int_field(toks[2], "genspec.per_domain"));
            spec.atypical_ratio = parse_real_field(toks[3], "genspec.atypical_ratio");
            spec.patch_size = static_cast<int>(parse_int_field(toks[4], "genspec.patch_size"));
            m.genspec = spec;
            m.gen_seed = parse_u64_field(toks[5], "genspec.seed");
        } else if (toks[0] == "domain") {
            if (toks.size() != 2)
                throw Error(ErrorCode::SchemaViolation, where + ": domain needs 1 field");
            m.domains.push_back(toks[1]);
        } else if (toks[0] == "counts") {
            if (toks.size() != 4)
                throw Error(ErrorCode::SchemaViolation, where + ": counts needs 3 fields");
            ClassCount cc;
            cc.typical = static_cast<int>(parse_int_field(toks[2], "counts.typical"));
            cc.atypical = static_cast<int>(parse_int_field(toks[3], "counts.atypical"));
            m.class_counts[toks[1]] = cc;
        } else if (toks[0] == "sample") {
            if (toks.size() != 6)
                throw Error(ErrorCode::SchemaViolation, where + ": sample needs 5 fields");
            SampleDesc s;
            s.id = toks[1];
            s.domain = toks[2];
            s.label = label_from_string(toks[3]);
            s.patch_ref = toks[4];
            s.mask_ref = toks[5];
            m.samples.push_back(std::move(s));
        } else {
            throw Error(ErrorCode::SchemaViolation, where + ": unknown record '" + toks[0] + "'");
        }
    }
    validate_manifest(m);
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    if (manifest.genspec) {
        const SyntheticSpec& g = *manifest.genspec;
        std::ostringstream ratio;
        ratio.precision(17);
        ratio << g.atypical_ratio;
        out << "genspec " << g.domains << " " << g.per_domain << " " << ratio.str() << " "
            << g.patch_size << " " << manifest.gen_seed << "\n";
    }
    for (const auto& d : manifest.domains) out << "domain " << d << "\n";
    for (const auto& d : manifest.domains) {
        auto it = manifest.class_counts.find(d);
        ClassCount cc = it == manifest.class_counts.end() ? ClassCount{} : it->second;
        out << "counts " << d << " " << cc.typical << " " << cc.atypical << "\n";
    }
    for (const auto& s : manifest.samples)
        out << "sample " << s.id << " " << s.domain << " " << to_string(s.label) << " "
            << s.patch_ref << " " << s.mask_ref << "\n";
    if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

Tensor mask_from_point(const Tensor& patch, PointAnnotation point, int radius_hint) {
    const int h = patch.h, w = patch.w;
    if (point.center_x < 0 || point.center_x >= w || point.center_y < 0 || point.center_y >= h)
        throw Error(ErrorCode::PointOutOfBounds,
                    "(" + std::to_string(point.center_x) + "," + std::to_string(point.center_y) +
                        ") outside " + std::to_string(w) + "x" + std::to_string(h));

    auto gray = [&](int y, int x) {
        float s = 0.0f;
        for (int c = 0; c < patch.c; ++c) s += patch.at(0, c, y, x);
        return s / static_cast<float>(patch.c);
    };

    const long long radius = 2LL * std::max(radius_hint, 0);
    const long long radius_sq = radius * radius;
    const float seed_gray = gray(point.center_y, point.center_x);
    const float tol = 0.1f;

    Tensor mask(1, 1, h, w);
    std::deque<std::pair<int, int>> queue;
    mask.at(0, 0, point.center_y, point.center_x) = 1.0f;
    queue.emplace_back(point.center_y, point.center_x);

    const int dy[4] = {-1, 1, 0, 0};
    const int dx[4] = {0, 0, -1, 1};
    while (!queue.empty()) {
        auto [y, x] = queue.front();
        queue.pop_front();
        for (int k = 0; k < 4; ++k) {
            int ny = y + dy[k], nx = x + dx[k];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            if (mask.at(0, 0, ny, nx) != 0.0f) continue;
            long long ddy = ny - point.center_y, ddx = nx - point.center_x;
            if (ddy * ddy + ddx * ddx > radius_sq) continue;
            if (std::abs(gray(ny, nx) - seed_gray) > tol) continue;
            mask.at(0, 0, ny, nx) = 1.0f;
            queue.emplace_back(ny, nx);
        }
    }
    return mask;
}

Tensor derive_pixel_class_map(const Tensor& binary_mask, Label label) {
    Tensor map = Tensor::zeros_like(binary_mask);
    const float id = static_cast<float>(pixel_class_of(label));
    for (size_t i = 0; i < binary_mask.size(); ++i) {
        float v = binary_mask[i];
        if (v != 0.0f && v != 1.0f)
            throw Error(ErrorCode::ShapeMismatch, "binary mask must hold {0,1} values");
        map[i] = v * id;
    }
    return map;
}

namespace {

constexpr double kPi = 3.14159265358979323846;

struct DomainParams {
    double base[3];
    double tex_freq, tex_theta, tex_amp, noise;
};

DomainParams domain_params(uint64_t gen_seed, int domain_index) {
    Rng r(mix_seed(gen_seed, 0xD0, static_cast<uint64_t>(domain_index)));
    DomainParams p{};
    p.base[0] = 0.70 + 0.22 * r.uniform();
    p.base[1] = 0.55 + 0.28 * r.uniform();
    p.base[2] = 0.62 + 0.30 * r.uniform();
    p.tex_freq = 2.0 + 10.0 * r.uniform();
    p.tex_theta = kPi * r.uniform();
    p.tex_amp = 0.03 + 0.05 * r.uniform();
    p.noise = 0.012 + 0.020 * r.uniform();
    return p;
}

struct Ellipse {
    double cx, cy, a, b, alpha;
    bool contains(double x, double y) const {
        double dx = x - cx, dy = y - cy;
        double ca = std::cos(alpha), sa = std::sin(alpha);
        double xr = (dx * ca + dy * sa) / a;
        double yr = (-dx * sa + dy * ca) / b;
        return xr * xr + yr * yr <= 1.0;
    }
};

void generate_sample_pixels(int size, const DomainParams& dp, Label label, uint64_t sample_seed,
                            Tensor& patch, Tensor& binary_mask) {
    Rng r(sample_seed);
    const double s = static_cast<double>(size);

    double phase = 2.0 * kPi * r.uniform();
    Ellipse primary;
    primary.cx = s * (0.5 + 0.16 * (r.uniform() - 0.5));
    primary.cy = s * (0.5 + 0.16 * (r.uniform() - 0.5));
    primary.a = s * (0.13 + 0.08 * r.uniform());
    primary.b = s * (0.13 + 0.08 * r.uniform());
    primary.alpha = kPi * r.uniform();

    double col[3];
    col[0] = 0.32 + 0.10 * r.uniform();
    col[1] = 0.16 + 0.10 * r.uniform();
    col[2] = 0.46 + 0.10 * r.uniform();

    Ellipse lobe{};
    bool has_lobe = label == Label::Atypical;
    if (has_lobe) {
        double psi = 2.0 * kPi * r.uniform();
        double dist = (1.05 + 0.35 * r.uniform()) * primary.a;
        lobe.a = (0.55 + 0.25 * r.uniform()) * primary.a;
        lobe.b = (0.55 + 0.25 * r.uniform()) * primary.b;
        lobe.alpha = kPi * r.uniform();
        lobe.cx = primary.cx + dist * std::cos(psi);
        lobe.cy = primary.cy + dist * std::sin(psi);
    }

    patch = Tensor(1, 3, size, size);
    binary_mask = Tensor(1, 1, size, size);
    const double phase_off[3] = {0.0, 2.0944, 4.1888};
    const double ct = std::cos(dp.tex_theta), st = std::sin(dp.tex_theta);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            bool inside = primary.contains(x, y) || (has_lobe && lobe.contains(x, y));
            binary_mask.at(0, 0, y, x) = inside ? 1.0f : 0.0f;
            double proj = (x * ct + y * st) / s;
            for (int ch = 0; ch < 3; ++ch) {
                double val;
                if (inside) {
                    val = col[ch] + 0.05 * std::sin(2.0 * kPi * 3.0 * (x + y) / s + phase);
                } else {
                    val = dp.base[ch] +
                          dp.tex_amp * std::sin(2.0 * kPi * dp.tex_freq * proj + phase + phase_off[ch]);
                }
                val += dp.noise * (2.0 * r.uniform() - 1.0);
                int q = static_cast<int>(std::lround(val * 255.0));
                q = q < 0 ? 0 : (q > 255 ? 255 : q);
                patch.at(0, ch, y, x) = static_cast<float>(q) / 255.0f;
            }
        }
}

void validate_spec(const SyntheticSpec& spec) {
    if (spec.domains < 3)
        throw Error(ErrorCode::InvalidSpec, "at least 3 domains required, got " +
                                                std::to_string(spec.domains));
    if (spec.per_domain <= 0)
        throw Error(ErrorCode::InvalidSpec, "per-domain sample count must be positive");
    if (spec.patch_size <= 0 || spec.patch_size % 8 != 0)
        throw Error(ErrorCode::InvalidSpec, "patch size must be a positive multiple of 8");
    if (spec.atypical_ratio < 0.0 || spec.atypical_ratio > 1.0)
        throw Error(ErrorCode::InvalidSpec, "atypical ratio must lie in [0,1]");
}

uint64_t sample_seed_of(uint64_t gen_seed, int domain_index, int index_in_domain) {
    return mix_seed(mix_seed(gen_seed, 0x5A, static_cast<uint64_t>(domain_index)),
                    static_cast<uint64_t>(index_in_domain));
}

std::string zero_pad(int v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

} // namespace

DatasetManifest generate_synthetic(const SyntheticSpec& spec, uint64_t seed) {
    validate_spec(spec);
    DatasetManifest m;
    m.genspec = spec;
    m.gen_seed = seed;
    const int n_atypical = static_cast<int>(std::floor(spec.atypical_ratio * spec.per_domain));
    const int n_typical = spec.per_domain - n_atypical;
    for (int d = 0; d < spec.domains; ++d) {
        std::string domain = "d" + std::to_string(d);
        m.domains.push_back(domain);
        m.class_counts[domain] = ClassCount{n_typical, n_atypical};
        for (int i = 0; i < spec.per_domain; ++i) {
            SampleDesc s;
            s.id = domain + "_s" + zero_pad(i, 3);
            s.domain = domain;
            s.label = i < n_typical ? Label::Typical : Label::Atypical;
            std::string ref = "seed:" + std::to_string(sample_seed_of(seed, d, i));
            s.patch_ref = ref;
            s.mask_ref = ref;
            m.samples.push_back(std::move(s));
        }
    }
    return m;
}

DatasetManifest materialize(const DatasetManifest& manifest, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir / "images");
    std::filesystem::create_directories(out_dir / "masks");
    DatasetManifest out;
    out.domains = manifest.domains;
    out.class_counts = manifest.class_counts;
    out.base_dir = out_dir;
    for (size_t i = 0; i < manifest.samples.size(); ++i) {
        Sample sample = load_sample(manifest, i);
        SampleDesc desc = manifest.samples[i];
        desc.patch_ref = "images/" + desc.id + ".ppm";
        desc.mask_ref = "masks/" + desc.id + ".pgm";
        write_ppm(sample.patch, out_dir / desc.patch_ref);
        write_pgm(sample.pixel_class_map, 2, out_dir / desc.mask_ref);
        out.samples.push_back(std::move(desc));
    }
    return out;
}

Sample load_sample(const DatasetManifest& manifest, size_t index) {
    const SampleDesc& desc = manifest.samples.at(index);
    Sample sample;
    sample.sample_id = desc.id;
    sample.domain = desc.domain;
    sample.label = desc.label;

    if (desc.patch_ref.rfind("seed:", 0) == 0) {
        if (!manifest.genspec)
            throw Error(ErrorCode::SchemaViolation,
                        "sample " + desc.id + ": seed ref without genspec header");
        uint64_t sample_seed = parse_u64_field(desc.patch_ref.substr(5), "sample.seed");
        int d = manifest.domain_index(desc.domain);
        DomainParams dp = domain_params(manifest.gen_seed, d);
        generate_sample_pixels(manifest.genspec->patch_size, dp, desc.label, sample_seed,
                               sample.patch, sample.binary_mask);
        sample.pixel_class_map = derive_pixel_class_map(sample.binary_mask, desc.label);
        return sample;
    }

    sample.patch = read_ppm(manifest.base_dir / desc.patch_ref);
    Tensor class_map = read_pgm(manifest.base_dir / desc.mask_ref);
    if (class_map.h != sample.patch.h || class_map.w != sample.patch.w)
        throw Error(ErrorCode::SchemaViolation,
                    "sample " + desc.id + ": mask dimensions differ from patch dimensions");
    const float expected = static_cast<float>(pixel_class_of(desc.label));
    Tensor binary(1, 1, class_map.h, class_map.w);
    for (size_t i = 0; i < class_map.size(); ++i) {
        float v = class_map[i];
        if (v != 0.0f && v != expected)
            throw Error(ErrorCode::SchemaViolation,
                        "sample " + desc.id + ": class map value inconsistent with label");
        binary[i] = v == 0.0f ? 0.0f : 1.0f;
    }
    sample.binary_mask = std::move(binary);
    sample.pixel_class_map = std::move(class_map);
    return sample;
}

SampleStore::SampleStore(DatasetManifest manifest)
    : manifest_(std::move(manifest)), cache_(manifest_.samples.size()) {}

const Sample& SampleStore::get(size_t index) const {
    std::lock_guard<std::mutex> lock(mu_);
    if (!cache_.at(index)) {
        cache_[index] = std::make_unique<Sample>(load_sample(manifest_, index));
        log_.push_back(index);
    }
    return *cache_[index];
}

std::vector<size_t> SampleStore::access_log() const {
    std::lock_guard<std::mutex> lock(mu_);
    return log_;
}

std::vector<size_t> SampleStore::indices_of(const std::vector<std::string>& domains) const {
    std::set<std::string> wanted(domains.begin(), domains.end());
    std::vector<size_t> out;
    for (size_t i = 0; i < manifest_.samples.size(); ++i)
        if (wanted.count(manifest_.samples[i].domain)) out.push_back(i);
    return out;
}

} // namespace mitl
