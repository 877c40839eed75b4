#include "nfkit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace nfkit::data {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_double(const std::string& s, std::size_t row) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw format_error("cell table row " + std::to_string(row) + ": bad number '" + s + "'");
    }
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double sq_dist(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    double dx = a[0] - b[0], dy = a[1] - b[1];
    return dx * dx + dy * dy;
}

}  // namespace

const Slide& Dataset::slide_at(int time_index) const {
    for (const auto& s : slides)
        if (s.time_index == time_index) return s;
    throw param_error("no slide at time index " + std::to_string(time_index));
}

int Microenvironment::valid_count() const {
    int n = 0;
    for (auto m : mask) n += m ? 1 : 0;
    return n;
}

std::string meta_path(const std::string& cells_path) { return cells_path + ".meta"; }

std::vector<Slide> load_slides(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw format_error("cannot open cell table: " + path);

    std::string line;
    std::vector<std::string> header;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty() || line[0] == '#') continue;
        header = split_csv(line);
        break;
    }
    if (header.empty()) throw format_error(path + ": no cells");

    int time_col = -1, x_col = -1, y_col = -1, type_col = -1, sample_col = -1;
    std::vector<int> feature_cols;
    std::vector<int> feature_ids;
    for (std::size_t c = 0; c < header.size(); ++c) {
        const std::string& name = header[c];
        if (name == "time") time_col = static_cast<int>(c);
        else if (name == "x") x_col = static_cast<int>(c);
        else if (name == "y") y_col = static_cast<int>(c);
        else if (name == "type") type_col = static_cast<int>(c);
        else if (name == "sample_id") sample_col = static_cast<int>(c);
        else if (name.size() > 1 && name[0] == 'f') {
            feature_cols.push_back(static_cast<int>(c));
            feature_ids.push_back(std::atoi(name.c_str() + 1));
        } else {
            throw format_error(path + ": unknown column '" + name + "'");
        }
    }
    (void)sample_col;
    if (time_col < 0 || x_col < 0 || y_col < 0) throw format_error(path + ": missing time/x/y column");
    for (std::size_t i = 0; i < feature_ids.size(); ++i)
        if (feature_ids[i] != static_cast<int>(i))
            throw format_error(path + ": feature columns must be f0..f{D-1} in order");

    std::map<int, std::vector<Cell>> by_time;
    std::size_t n_cells = 0;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty() || line[0] == '#') continue;
        auto fields = split_csv(line);
        if (fields.size() != header.size())
            throw format_error(path + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                               " fields, expected " + std::to_string(header.size()));
        Cell cell;
        cell.time_index = static_cast<int>(parse_double(fields[static_cast<std::size_t>(time_col)], row));
        cell.coords[0] = parse_double(fields[static_cast<std::size_t>(x_col)], row);
        cell.coords[1] = parse_double(fields[static_cast<std::size_t>(y_col)], row);
        cell.features.reserve(feature_cols.size());
        for (int fc : feature_cols) cell.features.push_back(parse_double(fields[static_cast<std::size_t>(fc)], row));
        if (type_col >= 0) cell.type_label = static_cast<int>(parse_double(fields[static_cast<std::size_t>(type_col)], row));
        by_time[cell.time_index].push_back(std::move(cell));
        ++n_cells;
    }
    if (n_cells == 0) throw format_error(path + ": no cells");

    std::vector<Slide> slides;
    for (auto& [t, cells] : by_time) {
        Slide s;
        s.time_index = t;
        s.cells = std::move(cells);
        slides.push_back(std::move(s));
    }
    return slides;
}

namespace {

DatasetMeta load_meta(const std::string& path) {
    DatasetMeta m;
    std::ifstream is(path);
    if (!is) return m;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw format_error(path + ": bad metadata line '" + line + "'");
        std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "feature_dim") m.feature_dim = std::stoi(v);
        else if (k == "num_timepoints") m.num_timepoints = std::stoi(v);
        else if (k == "num_types") m.num_types = std::stoi(v);
        else if (k == "seed") m.seed = std::stoull(v);
        else if (k == "normalized") m.normalized = v == "1";
        else if (k == "log1p") m.log1p = v == "1";
        else if (k == "pca") m.pca = v == "1";
        else if (k == "std_features") m.std_features = v == "1";
        else if (k == "std_coords") m.std_coords = v == "1";
        else if (k == "feature_kind") m.feature_kind = v;
        else throw format_error(path + ": unknown metadata key '" + k + "'");
    }
    return m;
}

void save_meta(const std::string& path, const DatasetMeta& m) {
    std::ofstream os(path);
    if (!os) throw format_error("cannot write metadata: " + path);
    os << "feature_dim=" << m.feature_dim << '\n';
    os << "num_timepoints=" << m.num_timepoints << '\n';
    os << "num_types=" << m.num_types << '\n';
    os << "seed=" << m.seed << '\n';
    os << "normalized=" << (m.normalized ? 1 : 0) << '\n';
    os << "log1p=" << (m.log1p ? 1 : 0) << '\n';
    os << "pca=" << (m.pca ? 1 : 0) << '\n';
    os << "std_features=" << (m.std_features ? 1 : 0) << '\n';
    os << "std_coords=" << (m.std_coords ? 1 : 0) << '\n';
    os << "feature_kind=" << m.feature_kind << '\n';
}

void write_number(std::ostream& os, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf;
}

void write_table(std::ostream& os, const std::vector<Slide>& slides, bool with_type,
                 const std::vector<int>* sample_ids) {
    std::size_t dim = 0;
    for (const auto& s : slides)
        for (const auto& c : s.cells) dim = std::max(dim, c.features.size());
    os << "time,x,y";
    for (std::size_t d = 0; d < dim; ++d) os << ",f" << d;
    if (with_type) os << ",type";
    if (sample_ids) os << ",sample_id";
    os << '\n';
    std::size_t idx = 0;
    for (const auto& s : slides) {
        for (const auto& c : s.cells) {
            os << s.time_index << ',';
            write_number(os, c.coords[0]);
            os << ',';
            write_number(os, c.coords[1]);
            for (std::size_t d = 0; d < dim; ++d) {
                os << ',';
                write_number(os, d < c.features.size() ? c.features[d] : 0.0);
            }
            if (with_type) os << ',' << c.type_label;
            if (sample_ids) os << ',' << (*sample_ids)[idx];
            os << '\n';
            ++idx;
        }
    }
}

}  // namespace

Dataset load_dataset(const std::string& path) {
    Dataset ds;
    ds.slides = load_slides(path);
    ds.meta = load_meta(meta_path(path));
    if (ds.meta.feature_dim == 0 && !ds.slides.empty() && !ds.slides[0].cells.empty())
        ds.meta.feature_dim = static_cast<int>(ds.slides[0].cells[0].features.size());
    if (ds.meta.num_timepoints == 0) ds.meta.num_timepoints = static_cast<int>(ds.slides.size());
    if (ds.meta.num_types == 0) {
        int mx = -1;
        for (const auto& s : ds.slides)
            for (const auto& c : s.cells) mx = std::max(mx, c.type_label);
        ds.meta.num_types = mx + 1;
    }
    for (const auto& s : ds.slides)
        for (const auto& c : s.cells)
            if (static_cast<int>(c.features.size()) != ds.meta.feature_dim)
                throw format_error(path + ": feature dimension not uniform");
    return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path);
    if (!os) throw format_error("cannot write cell table: " + path);
    bool with_type = false;
    for (const auto& s : ds.slides)
        for (const auto& c : s.cells)
            if (c.type_label >= 0) with_type = true;
    write_table(os, ds.slides, with_type, nullptr);
    save_meta(meta_path(path), ds.meta);
}

void save_generated(const std::string& path, const std::vector<Slide>& slides, const std::vector<int>& sample_ids) {
    std::size_t total = 0;
    for (const auto& s : slides) total += s.cells.size();
    if (sample_ids.size() != total) throw param_error("save_generated: sample_id count mismatch");
    std::ofstream os(path);
    if (!os) throw format_error("cannot write cell table: " + path);
    write_table(os, slides, false, &sample_ids);
}

Matrix total_count_normalize(const Matrix& raw) {
    std::vector<double> sums(static_cast<std::size_t>(raw.rows));
    for (std::int64_t r = 0; r < raw.rows; ++r) {
        double s = 0;
        for (std::int64_t c = 0; c < raw.cols; ++c) {
            double x = raw.at(r, c);
            if (x < 0) throw param_error("total_count_normalize: negative count at cell " + std::to_string(r));
            s += x;
        }
        if (s <= 0) throw param_error("total_count_normalize: cell " + std::to_string(r) + " has zero total count");
        sums[static_cast<std::size_t>(r)] = s;
    }
    double target = median(sums);
    Matrix out = raw;
    for (std::int64_t r = 0; r < raw.rows; ++r) {
        double scale = target / sums[static_cast<std::size_t>(r)];
        for (std::int64_t c = 0; c < raw.cols; ++c) out.at(r, c) *= scale;
    }
    return out;
}

Matrix log1p_transform(const Matrix& features) {
    Matrix out = features;
    for (auto& x : out.v) {
        if (x < 0) throw param_error("log1p_transform: negative entry");
        x = std::log1p(x);
    }
    return out;
}

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
// eigenvalues and column eigenvectors, unsorted.
void jacobi_eigen(std::vector<double>& a, std::int64_t n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
    eigvecs.assign(static_cast<std::size_t>(n * n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) eigvecs[static_cast<std::size_t>(i * n + i)] = 1.0;
    auto A = [&](std::int64_t i, std::int64_t j) -> double& { return a[static_cast<std::size_t>(i * n + j)]; };
    auto V = [&](std::int64_t i, std::int64_t j) -> double& { return eigvecs[static_cast<std::size_t>(i * n + j)]; };

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = i + 1; j < n; ++j) off += A(i, j) * A(i, j);
        if (off < 1e-24) break;
        for (std::int64_t p = 0; p < n - 1; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                double apq = A(p, q);
                if (std::fabs(apq) < 1e-300) continue;
                double theta = (A(q, q) - A(p, p)) / (2 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1));
                double c = 1.0 / std::sqrt(t * t + 1), s = t * c;
                for (std::int64_t i = 0; i < n; ++i) {
                    double aip = A(i, p), aiq = A(i, q);
                    A(i, p) = c * aip - s * aiq;
                    A(i, q) = s * aip + c * aiq;
                }
                for (std::int64_t i = 0; i < n; ++i) {
                    double api = A(p, i), aqi = A(q, i);
                    A(p, i) = c * api - s * aqi;
                    A(q, i) = s * api + c * aqi;
                }
                for (std::int64_t i = 0; i < n; ++i) {
                    double vip = V(i, p), viq = V(i, q);
                    V(i, p) = c * vip - s * viq;
                    V(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    eigvals.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) eigvals[static_cast<std::size_t>(i)] = A(i, i);
}

}  // namespace

PcaResult pca(const Matrix& features, int n_components) {
    std::int64_t n = features.rows, g = features.cols;
    if (n_components < 1 || n_components > std::min(n, g))
        throw shape_error("pca: n_components " + std::to_string(n_components) + " exceeds min(" +
                          std::to_string(n) + "," + std::to_string(g) + ")");
    PcaResult res;
    res.mean.assign(static_cast<std::size_t>(g), 0.0);
    for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t c = 0; c < g; ++c) res.mean[static_cast<std::size_t>(c)] += features.at(r, c);
    for (auto& m : res.mean) m /= static_cast<double>(n);

    // Covariance (sample convention), then Jacobi.
    std::vector<double> cov(static_cast<std::size_t>(g * g), 0.0);
    for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t i = 0; i < g; ++i) {
            double xi = features.at(r, i) - res.mean[static_cast<std::size_t>(i)];
            for (std::int64_t j = i; j < g; ++j)
                cov[static_cast<std::size_t>(i * g + j)] += xi * (features.at(r, j) - res.mean[static_cast<std::size_t>(j)]);
        }
    double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (std::int64_t i = 0; i < g; ++i)
        for (std::int64_t j = i; j < g; ++j) {
            cov[static_cast<std::size_t>(i * g + j)] /= denom;
            cov[static_cast<std::size_t>(j * g + i)] = cov[static_cast<std::size_t>(i * g + j)];
        }

    std::vector<double> eigvals, eigvecs;
    jacobi_eigen(cov, g, eigvals, eigvecs);

    std::vector<std::int64_t> order(static_cast<std::size_t>(g));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::int64_t a, std::int64_t b) { return eigvals[static_cast<std::size_t>(a)] > eigvals[static_cast<std::size_t>(b)]; });

    res.basis.rows = g;
    res.basis.cols = n_components;
    res.basis.v.assign(static_cast<std::size_t>(g * n_components), 0.0);
    res.explained.resize(static_cast<std::size_t>(n_components));
    for (int k = 0; k < n_components; ++k) {
        std::int64_t src = order[static_cast<std::size_t>(k)];
        res.explained[static_cast<std::size_t>(k)] = eigvals[static_cast<std::size_t>(src)];
        // Sign convention: largest-magnitude loading positive.
        std::int64_t arg = 0;
        double best = -1;
        for (std::int64_t i = 0; i < g; ++i) {
            double mag = std::fabs(eigvecs[static_cast<std::size_t>(i * g + src)]);
            if (mag > best) {
                best = mag;
                arg = i;
            }
        }
        double sign = eigvecs[static_cast<std::size_t>(arg * g + src)] >= 0 ? 1.0 : -1.0;
        for (std::int64_t i = 0; i < g; ++i)
            res.basis.at(i, k) = sign * eigvecs[static_cast<std::size_t>(i * g + src)];
    }

    res.embedding.rows = n;
    res.embedding.cols = n_components;
    res.embedding.v.assign(static_cast<std::size_t>(n * n_components), 0.0);
    for (std::int64_t r = 0; r < n; ++r)
        for (int k = 0; k < n_components; ++k) {
            double acc = 0;
            for (std::int64_t i = 0; i < g; ++i)
                acc += (features.at(r, i) - res.mean[static_cast<std::size_t>(i)]) * res.basis.at(i, k);
            res.embedding.at(r, k) = acc;
        }
    return res;
}

Matrix standardize_features(const Matrix& embedding) {
    if (embedding.rows < 2) throw param_error("standardize_features: need at least 2 cells");
    Matrix out = embedding;
    for (std::int64_t c = 0; c < embedding.cols; ++c) {
        double mean = 0;
        for (std::int64_t r = 0; r < embedding.rows; ++r) mean += embedding.at(r, c);
        mean /= static_cast<double>(embedding.rows);
        double var = 0;
        for (std::int64_t r = 0; r < embedding.rows; ++r) {
            double d = embedding.at(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<double>(embedding.rows);
        if (var <= 0)
            throw numeric_error("standardize_features: zero variance in dimension " + std::to_string(c));
        double inv = 1.0 / std::sqrt(var);
        for (std::int64_t r = 0; r < embedding.rows; ++r) out.at(r, c) = (embedding.at(r, c) - mean) * inv;
    }
    return out;
}

void standardize_coords(std::vector<Slide>& slides) {
    for (auto& slide : slides) {
        if (slide.cells.size() < 2)
            throw param_error("standardize_coords: slide " + std::to_string(slide.time_index) + " has <2 cells");
        for (int axis = 0; axis < 2; ++axis) {
            double mean = 0;
            for (const auto& c : slide.cells) mean += c.coords[static_cast<std::size_t>(axis)];
            mean /= static_cast<double>(slide.cells.size());
            double var = 0;
            for (const auto& c : slide.cells) {
                double d = c.coords[static_cast<std::size_t>(axis)] - mean;
                var += d * d;
            }
            var /= static_cast<double>(slide.cells.size());
            if (var <= 0)
                throw numeric_error("standardize_coords: slide " + std::to_string(slide.time_index) +
                                    " axis " + std::to_string(axis) + " is degenerate");
            double inv = 1.0 / std::sqrt(var);
            for (auto& c : slide.cells) c.coords[static_cast<std::size_t>(axis)] = (c.coords[static_cast<std::size_t>(axis)] - mean) * inv;
        }
    }
}

std::vector<Microenvironment> extract_microenvironments(const Slide& slide, double radius) {
    if (radius <= 0) throw param_error("extract_microenvironments: radius must be positive");
    std::size_t n = slide.cells.size();
    double r2 = radius * radius;

    // Uniform-grid bucketing keeps this near O(N) per query at desk scale.
    double minx = HUGE_VAL, miny = HUGE_VAL;
    for (const auto& c : slide.cells) {
        minx = std::min(minx, c.coords[0]);
        miny = std::min(miny, c.coords[1]);
    }
    double cell_size = radius;
    std::map<std::pair<long, long>, std::vector<int>> buckets;
    auto key_of = [&](const std::array<double, 2>& p) {
        return std::make_pair(static_cast<long>(std::floor((p[0] - minx) / cell_size)),
                              static_cast<long>(std::floor((p[1] - miny) / cell_size)));
    };
    for (std::size_t i = 0; i < n; ++i) buckets[key_of(slide.cells[i].coords)].push_back(static_cast<int>(i));

    std::vector<Microenvironment> envs(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& env = envs[i];
        env.center_index = static_cast<int>(i);
        env.time_index = slide.time_index;
        auto key = key_of(slide.cells[i].coords);
        std::vector<int> members;
        for (long dx = -1; dx <= 1; ++dx)
            for (long dy = -1; dy <= 1; ++dy) {
                auto it = buckets.find({key.first + dx, key.second + dy});
                if (it == buckets.end()) continue;
                for (int j : it->second)
                    if (sq_dist(slide.cells[i].coords, slide.cells[static_cast<std::size_t>(j)].coords) <= r2)
                        members.push_back(j);
            }
        std::sort(members.begin(), members.end());
        for (int j : members) {
            env.member_indices.push_back(j);
            env.coords.push_back(slide.cells[static_cast<std::size_t>(j)].coords);
            env.features.push_back(slide.cells[static_cast<std::size_t>(j)].features);
            env.mask.push_back(1);
        }
    }
    return envs;
}

int modal_env_size(const std::vector<Microenvironment>& envs) {
    if (envs.empty()) throw param_error("modal_env_size: empty environment set");
    std::map<int, int> counts;
    for (const auto& e : envs) counts[e.valid_count()] += 1;
    int best_k = 0, best_n = -1;
    for (auto [k, n] : counts) {
        if (n > best_n) {  // map order makes ties resolve to the smaller k
            best_n = n;
            best_k = k;
        }
    }
    return best_k;
}

std::vector<Microenvironment> standardize_env_size(const std::vector<Microenvironment>& envs, Rng& rng) {
    return standardize_env_size_to(envs, modal_env_size(envs), rng);
}

std::vector<Microenvironment> standardize_env_size_to(const std::vector<Microenvironment>& envs, int k, Rng& rng) {
    if (k < 1) throw param_error("standardize_env_size_to: k must be >= 1");
    std::vector<Microenvironment> out;
    out.reserve(envs.size());
    std::size_t feat_dim = 0;
    for (const auto& e : envs)
        if (!e.features.empty()) feat_dim = e.features[0].size();

    for (const auto& env : envs) {
        Microenvironment e;
        e.center_index = env.center_index;
        e.time_index = env.time_index;
        e.radius_bound = env.radius_bound;
        int n = static_cast<int>(env.member_indices.size());
        std::vector<int> pick;
        if (n <= k) {
            for (int i = 0; i < n; ++i) pick.push_back(i);
        } else {
            // Keep the center, subsample the rest without replacement.
            int center_slot = -1;
            std::vector<int> others;
            for (int i = 0; i < n; ++i) {
                if (env.member_indices[static_cast<std::size_t>(i)] == env.center_index && center_slot < 0)
                    center_slot = i;
                else
                    others.push_back(i);
            }
            auto perm = rng.permutation(others.size());
            if (center_slot >= 0) pick.push_back(center_slot);
            for (std::size_t i = 0; pick.size() < static_cast<std::size_t>(k); ++i)
                pick.push_back(others[perm[i]]);
            std::sort(pick.begin(), pick.end());
        }
        for (int i : pick) {
            e.member_indices.push_back(env.member_indices[static_cast<std::size_t>(i)]);
            e.coords.push_back(env.coords[static_cast<std::size_t>(i)]);
            e.features.push_back(env.features[static_cast<std::size_t>(i)]);
            e.mask.push_back(1);
        }
        while (static_cast<int>(e.mask.size()) < k) {
            e.member_indices.push_back(-1);
            e.coords.push_back({0.0, 0.0});
            e.features.push_back(std::vector<double>(feat_dim, 0.0));
            e.mask.push_back(0);
        }
        out.push_back(std::move(e));
    }
    return out;
}

KmeansResult kmeans_partition(const std::vector<std::array<double, 2>>& coords, int k, Rng& rng, int max_iter,
                              double tol) {
    std::size_t n = coords.size();
    if (k < 1 || static_cast<std::size_t>(k) > n)
        throw param_error("kmeans_partition: K=" + std::to_string(k) + " with N=" + std::to_string(n));

    KmeansResult res;
    res.centers.reserve(static_cast<std::size_t>(k));

    // k-means++ seeding.
    res.centers.push_back(coords[static_cast<std::size_t>(rng.uniform_index(n))]);
    std::vector<double> d2(n, HUGE_VAL);
    while (res.centers.size() < static_cast<std::size_t>(k)) {
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist(coords[i], res.centers.back()));
            total += d2[i];
        }
        std::size_t chosen = 0;
        if (total <= 0) {
            chosen = rng.uniform_index(n);
        } else {
            double target = rng.uniform() * total, acc = 0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    chosen = i;
                    break;
                }
            }
        }
        res.centers.push_back(coords[chosen]);
    }

    res.labels.assign(n, 0);
    for (int iter = 0; iter < max_iter; ++iter) {
        res.iterations = iter + 1;
        double iter_inertia = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = HUGE_VAL;
            int arg = 0;
            for (int c = 0; c < k; ++c) {
                double d = sq_dist(coords[i], res.centers[static_cast<std::size_t>(c)]);
                if (d < best) {
                    best = d;
                    arg = c;
                }
            }
            res.labels[i] = arg;
            iter_inertia += best;
        }
        res.inertia_trace.push_back(iter_inertia);

        std::vector<std::array<double, 2>> next(static_cast<std::size_t>(k), {0, 0});
        std::vector<int> counts(static_cast<std::size_t>(k), 0);
        for (std::size_t i = 0; i < n; ++i) {
            next[static_cast<std::size_t>(res.labels[i])][0] += coords[i][0];
            next[static_cast<std::size_t>(res.labels[i])][1] += coords[i][1];
            counts[static_cast<std::size_t>(res.labels[i])] += 1;
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] == 0) {
                // Reseed to the point farthest from its assigned center.
                std::size_t far = 0;
                double best = -1;
                for (std::size_t i = 0; i < n; ++i) {
                    double d = sq_dist(coords[i], res.centers[static_cast<std::size_t>(res.labels[i])]);
                    if (d > best) {
                        best = d;
                        far = i;
                    }
                }
                next[static_cast<std::size_t>(c)] = coords[far];
            } else {
                next[static_cast<std::size_t>(c)][0] /= counts[static_cast<std::size_t>(c)];
                next[static_cast<std::size_t>(c)][1] /= counts[static_cast<std::size_t>(c)];
            }
        }

        double shift = 0;
        for (int c = 0; c < k; ++c)
            shift = std::max(shift, std::sqrt(sq_dist(next[static_cast<std::size_t>(c)], res.centers[static_cast<std::size_t>(c)])));
        res.centers = std::move(next);
        if (shift < tol) break;
    }

    // Final assignment against the converged centers.
    res.inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double best = HUGE_VAL;
        int arg = 0;
        for (int c = 0; c < k; ++c) {
            double d = sq_dist(coords[i], res.centers[static_cast<std::size_t>(c)]);
            if (d < best) {
                best = d;
                arg = c;
            }
        }
        res.labels[i] = arg;
        res.inertia += best;
    }
    return res;
}

namespace {

std::vector<Microenvironment> grid_envs_once(const Slide& slide, double grid_step, double radius,
                                             int target_count, Rng& rng, bool& covered) {
    std::size_t n = slide.cells.size();
    double minx = HUGE_VAL, maxx = -HUGE_VAL, miny = HUGE_VAL, maxy = -HUGE_VAL;
    for (const auto& c : slide.cells) {
        minx = std::min(minx, c.coords[0]);
        maxx = std::max(maxx, c.coords[0]);
        miny = std::min(miny, c.coords[1]);
        maxy = std::max(maxy, c.coords[1]);
    }

    // Centered grid: nodes at (i + 1/2) * step keep edge cells within
    // step * sqrt(2) / 2 of a node.
    std::set<int> centroid_ids;
    std::vector<int> centroids;
    auto nodes_of = [&](double lo, double hi) {
        int count = std::max(1, static_cast<int>(std::ceil((hi - lo) / grid_step)));
        std::vector<double> xs(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) xs[static_cast<std::size_t>(i)] = lo + (i + 0.5) * grid_step;
        return xs;
    };
    for (double gx : nodes_of(minx, maxx)) {
        for (double gy : nodes_of(miny, maxy)) {
            double best = HUGE_VAL;
            int arg = 0;
            for (std::size_t i = 0; i < n; ++i) {
                double d = sq_dist(slide.cells[i].coords, {gx, gy});
                if (d < best) {
                    best = d;
                    arg = static_cast<int>(i);
                }
            }
            if (centroid_ids.insert(arg).second) centroids.push_back(arg);
        }
    }

    // Pad with random extra centroids up to target_count.
    if (static_cast<int>(centroids.size()) < target_count) {
        std::vector<int> remaining;
        for (std::size_t i = 0; i < n; ++i)
            if (!centroid_ids.count(static_cast<int>(i))) remaining.push_back(static_cast<int>(i));
        auto perm = rng.permutation(remaining.size());
        for (std::size_t i = 0; i < remaining.size() && static_cast<int>(centroids.size()) < target_count; ++i) {
            centroids.push_back(remaining[perm[i]]);
            centroid_ids.insert(remaining[perm[i]]);
        }
    }

    auto all_envs = extract_microenvironments(slide, radius);
    std::vector<Microenvironment> out;
    out.reserve(centroids.size());
    std::vector<std::uint8_t> seen(n, 0);
    for (int c : centroids) {
        out.push_back(all_envs[static_cast<std::size_t>(c)]);
        for (int m : out.back().member_indices) seen[static_cast<std::size_t>(m)] = 1;
    }
    covered = std::all_of(seen.begin(), seen.end(), [](std::uint8_t s) { return s == 1; });
    return out;
}

}  // namespace

std::vector<Microenvironment> discretized_grid_envs(const Slide& slide, double grid_step, double radius,
                                                    int target_count, Rng& rng) {
    if (grid_step <= 0) throw param_error("discretized_grid_envs: grid_step must be positive");
    bool covered = false;
    auto envs = grid_envs_once(slide, grid_step, radius, target_count, rng, covered);
    if (!covered) {
        envs = grid_envs_once(slide, grid_step / 2, radius, target_count, rng, covered);
        if (!covered)
            throw numeric_error("discretized_grid_envs: coverage unreachable after grid densification");
    }
    return envs;
}

Dataset synth_generate(const SynthConfig& config, std::uint64_t seed) {
    if (config.num_timepoints < 2) throw param_error("synth_generate: need >= 2 time points");
    if (config.num_types < 2) throw param_error("synth_generate: need >= 2 cell types");
    std::vector<int> base = config.cells_per_type;
    if (base.empty()) base.assign(static_cast<std::size_t>(config.num_types), 400);
    if (static_cast<int>(base.size()) != config.num_types)
        throw param_error("synth_generate: cells_per_type size mismatch");
    std::vector<double> growth = config.growth;
    if (growth.empty()) growth.assign(static_cast<std::size_t>(config.num_types), 1.0);
    if (static_cast<int>(growth.size()) != config.num_types)
        throw param_error("synth_generate: growth size mismatch");

    Rng rng(seed);

    // Spatial centers on a circle; feature means on scaled basis vectors so
    // pairwise separation is exactly feature_separation.
    std::vector<std::array<double, 2>> centers(static_cast<std::size_t>(config.num_types));
    for (int t = 0; t < config.num_types; ++t) {
        double ang = 2.0 * M_PI * t / config.num_types;
        centers[static_cast<std::size_t>(t)] = {config.spatial_radius * std::cos(ang),
                                                config.spatial_radius * std::sin(ang)};
    }
    std::vector<std::vector<double>> fmeans(static_cast<std::size_t>(config.num_types),
                                            std::vector<double>(static_cast<std::size_t>(config.feature_dim), 0.0));
    for (int t = 0; t < config.num_types; ++t) {
        if (t < config.feature_dim) {
            fmeans[static_cast<std::size_t>(t)][static_cast<std::size_t>(t)] =
                config.feature_separation / std::sqrt(2.0);
        } else {
            for (auto& x : fmeans[static_cast<std::size_t>(t)]) x = rng.normal();
            double norm = 0;
            for (double x : fmeans[static_cast<std::size_t>(t)]) norm += x * x;
            norm = std::sqrt(norm);
            for (auto& x : fmeans[static_cast<std::size_t>(t)]) x *= config.feature_separation / std::sqrt(2.0) / norm;
        }
    }

    Dataset ds;
    for (int s = 0; s < config.num_timepoints; ++s) {
        Slide slide;
        slide.time_index = s;
        for (int t = 0; t < config.num_types; ++t) {
            int count = std::max(1, static_cast<int>(std::lround(
                                        base[static_cast<std::size_t>(t)] *
                                        std::pow(growth[static_cast<std::size_t>(t)], static_cast<double>(s)))));
            std::array<double, 2> mu = {centers[static_cast<std::size_t>(t)][0] + config.drift[0] * s,
                                        centers[static_cast<std::size_t>(t)][1] + config.drift[1] * s};
            for (int i = 0; i < count; ++i) {
                Cell cell;
                cell.time_index = s;
                cell.type_label = t;
                cell.coords[0] = mu[0] + config.blob_sigma * rng.normal();
                cell.coords[1] = mu[1] + config.blob_sigma * rng.normal();
                cell.features.resize(static_cast<std::size_t>(config.feature_dim));
                for (int d = 0; d < config.feature_dim; ++d)
                    cell.features[static_cast<std::size_t>(d)] =
                        fmeans[static_cast<std::size_t>(t)][static_cast<std::size_t>(d)] +
                        config.feature_sigma * rng.normal();
                slide.cells.push_back(std::move(cell));
            }
        }
        ds.slides.push_back(std::move(slide));
    }
    ds.meta.feature_dim = config.feature_dim;
    ds.meta.num_timepoints = config.num_timepoints;
    ds.meta.num_types = config.num_types;
    ds.meta.seed = seed;
    ds.meta.feature_kind = "continuous";
    return ds;
}

}  // namespace nfkit::data
