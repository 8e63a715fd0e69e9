#include "kgqr/nncore.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace kgqr::nn {

double decayed_lr(const AdamConfig& cfg, int t) {
    double frac = 1.0 - static_cast<double>(t) / static_cast<double>(cfg.total_steps);
    return cfg.lr0 * std::max(0.0, frac);
}

// ---------------------------------------------------------------------------
// ParamStore

Param& ParamStore::ensure(const std::string& name, int rows, int cols, Init init) {
    auto it = by_name_.find(name);
    if (it != by_name_.end()) {
        Param& p = *params_[static_cast<size_t>(it->second)];
        if (p.value.rows() != rows || p.value.cols() != cols)
            throw Error("parameter shape mismatch for " + name);
        return p;
    }
    auto p = std::make_unique<Param>();
    p->name = name;
    p->index = static_cast<int>(params_.size());
    p->value.setZero(rows, cols);
    if (init == Init::One) {
        p->value.setOnes();
    } else if (init == Init::UniformFanIn) {
        double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) p->value(r, c) = rng_.uniform(-bound, bound);
    }
    p->grad.setZero(rows, cols);
    p->m.setZero(rows, cols);
    p->v.setZero(rows, cols);
    by_name_[name] = p->index;
    params_.push_back(std::move(p));
    return *params_.back();
}

Param& ParamStore::at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw Error("unknown parameter: " + name);
    return *params_[static_cast<size_t>(it->second)];
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw Error("unknown parameter: " + name);
    return *params_[static_cast<size_t>(it->second)];
}

void ParamStore::zero_grads() {
    for (auto& p : params_) p->grad.setZero();
}

void ParamStore::adam_step(const AdamConfig& cfg, int t) {
    double lr = decayed_lr(cfg, t);
    double bc1 = 1.0 - std::pow(cfg.beta1, t + 1);
    double bc2 = 1.0 - std::pow(cfg.beta2, t + 1);
    for (auto& p : params_) {
        if (!p->grad.allFinite())
            throw Error("non-finite gradient in parameter " + p->name);
        p->m = cfg.beta1 * p->m + (1.0 - cfg.beta1) * p->grad;
        p->v = cfg.beta2 * p->v + (1.0 - cfg.beta2) * p->grad.cwiseProduct(p->grad);
        if (lr == 0.0) continue;
        Mat mhat = p->m / bc1;
        Mat vhat = p->v / bc2;
        p->value.noalias() -= lr * (mhat.array() / (vhat.array().sqrt() + cfg.eps)).matrix();
    }
}

void ParamStore::save(const std::filesystem::path& path,
                      const std::map<std::string, std::string>& meta) const {
    std::ostringstream out;
    out << "kgqr-tensors 1\n";
    for (const auto& [k, v] : meta) out << "meta " << k << " " << v << "\n";
    for (const auto& p : params_)
        out << "tensor " << p->name << " " << p->value.rows() << " " << p->value.cols() << "\n";
    out << "data\n";
    for (const auto& p : params_) {
        for (int r = 0; r < p->value.rows(); ++r)
            for (int c = 0; c < p->value.cols(); ++c) {
                float f = static_cast<float>(p->value(r, c));
                char buf[4];
                std::memcpy(buf, &f, 4);
                out.write(buf, 4);
            }
    }
    write_file_atomic(path, out.str());
}

ParamStore ParamStore::load(const std::filesystem::path& path,
                            std::map<std::string, std::string>* meta) {
    std::string bytes = read_file(path);
    std::istringstream in(bytes);
    std::string line;
    if (!std::getline(in, line) || line != "kgqr-tensors 1")
        throw Error("bad tensor file header: " + path.string());
    ParamStore store(0);
    struct Shape {
        std::string name;
        int rows, cols;
    };
    std::vector<Shape> shapes;
    while (std::getline(in, line)) {
        if (line == "data") break;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (meta) (*meta)[key] = trim(value);
        } else if (tag == "tensor") {
            Shape s;
            ls >> s.name >> s.rows >> s.cols;
            shapes.push_back(s);
        } else {
            throw Error("bad tensor header line: " + line);
        }
    }
    size_t off = static_cast<size_t>(in.tellg());
    for (const auto& s : shapes) {
        Param& p = store.ensure(s.name, s.rows, s.cols, Init::Zero);
        size_t n = static_cast<size_t>(s.rows) * static_cast<size_t>(s.cols);
        if (off + 4 * n > bytes.size()) throw Error("truncated tensor file: " + path.string());
        for (int r = 0; r < s.rows; ++r)
            for (int c = 0; c < s.cols; ++c) {
                float f;
                std::memcpy(&f, bytes.data() + off, 4);
                off += 4;
                p.value(r, c) = static_cast<double>(f);
            }
    }
    return store;
}

uint64_t ParamStore::content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params_) {
        h = fnv1a(p->name, h);
        for (int r = 0; r < p->value.rows(); ++r)
            for (int c = 0; c < p->value.cols(); ++c) {
                float f = static_cast<float>(p->value(r, c));
                h = fnv1a_bytes(&f, 4, h);
            }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Tape

int Tape::push(Mat value, bool needs_grad, std::function<void()> bwd) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.bwd = needs_grad ? std::move(bwd) : nullptr;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Mat& Tape::grad_of(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
}

double Tape::scalar(int id) const {
    const Mat& v = value(id);
    if (v.rows() != 1 || v.cols() != 1) throw Error("scalar() on non-1x1 node");
    return v(0, 0);
}

int Tape::constant(Mat v) { return push(std::move(v), false); }

int Tape::param(Param& p) {
    int id = push(p.value, true);
    nodes_[static_cast<size_t>(id)].bwd = [this, id, &p] {
        p.grad += nodes_[static_cast<size_t>(id)].grad;
    };
    return id;
}

int Tape::gather_param(Param& p, std::vector<int> rows) {
    Mat v(static_cast<int>(rows.size()), p.value.cols());
    for (size_t i = 0; i < rows.size(); ++i) v.row(static_cast<int>(i)) = p.value.row(rows[i]);
    int id = push(std::move(v), true);
    nodes_[static_cast<size_t>(id)].bwd = [this, id, &p, rows = std::move(rows)] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        for (size_t i = 0; i < rows.size(); ++i)
            p.grad.row(rows[i]) += g.row(static_cast<int>(i));
    };
    return id;
}

int Tape::gather_table(const Mat* table, const std::vector<int>& rows) {
    Mat v(static_cast<int>(rows.size()), table->cols());
    for (size_t i = 0; i < rows.size(); ++i) v.row(static_cast<int>(i)) = table->row(rows[i]);
    return push(std::move(v), false);
}

int Tape::add(int a, int b) {
    int id = push(value(a) + value(b), needs(a) || needs(b));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, b] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        if (needs(a)) grad_of(a) += g;
        if (needs(b)) grad_of(b) += g;
    };
    return id;
}

int Tape::sub(int a, int b) {
    int id = push(value(a) - value(b), needs(a) || needs(b));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, b] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        if (needs(a)) grad_of(a) += g;
        if (needs(b)) grad_of(b) -= g;
    };
    return id;
}

int Tape::mul(int a, int b) {
    int id = push(value(a).cwiseProduct(value(b)), needs(a) || needs(b));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, b] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        if (needs(a)) grad_of(a) += g.cwiseProduct(value(b));
        if (needs(b)) grad_of(b) += g.cwiseProduct(value(a));
    };
    return id;
}

int Tape::affine(int a, double alpha, double beta) {
    int id = push((value(a).array() * alpha + beta).matrix(), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, alpha] {
        grad_of(a) += alpha * nodes_[static_cast<size_t>(id)].grad;
    };
    return id;
}

int Tape::add_rowvec(int a, int bias) {
    Mat v = value(a);
    v.rowwise() += value(bias).row(0);
    int id = push(std::move(v), needs(a) || needs(bias));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, bias] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        if (needs(a)) grad_of(a) += g;
        if (needs(bias)) grad_of(bias) += g.colwise().sum();
    };
    return id;
}

int Tape::mul_colvec(int a, int s) {
    Mat v = value(a).array().colwise() * value(s).col(0).array();
    int id = push(std::move(v), needs(a) || needs(s));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, s] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        if (needs(a)) grad_of(a) += (g.array().colwise() * value(s).col(0).array()).matrix();
        if (needs(s)) grad_of(s) += g.cwiseProduct(value(a)).rowwise().sum();
    };
    return id;
}

int Tape::matmul(int a, int b) {
    if (value(a).cols() != value(b).rows()) throw Error("matmul dimension mismatch");
    int id = push(value(a) * value(b), needs(a) || needs(b));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, b] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        if (needs(a)) grad_of(a).noalias() += g * value(b).transpose();
        if (needs(b)) grad_of(b).noalias() += value(a).transpose() * g;
    };
    return id;
}

int Tape::matmul_nt(int a, int b) {
    if (value(a).cols() != value(b).cols()) throw Error("matmul_nt dimension mismatch");
    int id = push(value(a) * value(b).transpose(), needs(a) || needs(b));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, b] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        if (needs(a)) grad_of(a).noalias() += g * value(b);
        if (needs(b)) grad_of(b).noalias() += g.transpose() * value(a);
    };
    return id;
}

int Tape::transpose(int a) {
    int id = push(value(a).transpose(), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a] {
        grad_of(a) += nodes_[static_cast<size_t>(id)].grad.transpose();
    };
    return id;
}

int Tape::concat_cols(int a, int b) {
    if (value(a).rows() != value(b).rows()) throw Error("concat_cols row mismatch");
    Mat v(value(a).rows(), value(a).cols() + value(b).cols());
    v << value(a), value(b);
    int id = push(std::move(v), needs(a) || needs(b));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, b] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        int ca = static_cast<int>(value(a).cols());
        if (needs(a)) grad_of(a) += g.leftCols(ca);
        if (needs(b)) grad_of(b) += g.rightCols(g.cols() - ca);
    };
    return id;
}

int Tape::slice_cols(int a, int start, int len) {
    int id = push(value(a).middleCols(start, len), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, start, len] {
        grad_of(a).middleCols(start, len) += nodes_[static_cast<size_t>(id)].grad;
    };
    return id;
}

int Tape::gather_rows(int a, std::vector<int> rows) {
    Mat v(static_cast<int>(rows.size()), value(a).cols());
    for (size_t i = 0; i < rows.size(); ++i) v.row(static_cast<int>(i)) = value(a).row(rows[i]);
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, rows = std::move(rows)] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        Mat& ga = grad_of(a);
        for (size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += g.row(static_cast<int>(i));
    };
    return id;
}

int Tape::stack_rows(const std::vector<int>& parts) {
    if (parts.empty()) throw Error("stack_rows of nothing");
    int total = 0;
    bool ng = false;
    for (int p : parts) {
        total += static_cast<int>(value(p).rows());
        ng = ng || needs(p);
    }
    Mat v(total, value(parts[0]).cols());
    int at = 0;
    for (int p : parts) {
        v.middleRows(at, value(p).rows()) = value(p);
        at += static_cast<int>(value(p).rows());
    }
    int id = push(std::move(v), ng);
    nodes_[static_cast<size_t>(id)].bwd = [this, id, parts] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        int at = 0;
        for (int p : parts) {
            int r = static_cast<int>(value(p).rows());
            if (needs(p)) grad_of(p) += g.middleRows(at, r);
            at += r;
        }
    };
    return id;
}

int Tape::pick(int a, int r, int c) {
    Mat v(1, 1);
    v(0, 0) = value(a)(r, c);
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, r, c] {
        grad_of(a)(r, c) += nodes_[static_cast<size_t>(id)].grad(0, 0);
    };
    return id;
}

int Tape::leaky_relu(int a, double slope) {
    // Subgradient at 0 taken as 1.
    Mat v = value(a).unaryExpr([slope](double x) { return x >= 0.0 ? x : slope * x; });
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, slope] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        grad_of(a) += g.cwiseProduct(
            value(a).unaryExpr([slope](double x) { return x >= 0.0 ? 1.0 : slope; }));
    };
    return id;
}

int Tape::elu(int a) {
    Mat v = value(a).unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        const Mat& y = nodes_[static_cast<size_t>(id)].value;
        grad_of(a) += g.cwiseProduct(
            (value(a).array() > 0.0).select(Mat::Ones(y.rows(), y.cols()), y.array() + 1.0).matrix());
    };
    return id;
}

int Tape::sqrt_eps(int a, double eps) {
    Mat v = (value(a).array() + eps).sqrt();
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        const Mat& y = nodes_[static_cast<size_t>(id)].value;
        grad_of(a) += (g.array() * 0.5 / y.array()).matrix();
    };
    return id;
}

int Tape::row_softmax(int a) {
    Mat v = value(a);
    for (int r = 0; r < v.rows(); ++r) {
        double mx = v.row(r).maxCoeff();
        v.row(r) = (v.row(r).array() - mx).exp();
        v.row(r) /= v.row(r).sum();
    }
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        const Mat& p = nodes_[static_cast<size_t>(id)].value;
        Mat gp = g.cwiseProduct(p);
        Eigen::VectorXd rows = gp.rowwise().sum();
        grad_of(a) += gp - (p.array().colwise() * rows.array()).matrix();
    };
    return id;
}

int Tape::mean_rows(int a) {
    Mat v = value(a).colwise().mean();
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        double n = static_cast<double>(value(a).rows());
        grad_of(a).rowwise() += (g.row(0) / n);
    };
    return id;
}

int Tape::sum_all(int a) {
    Mat v(1, 1);
    v(0, 0) = value(a).sum();
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a] {
        grad_of(a).array() += nodes_[static_cast<size_t>(id)].grad(0, 0);
    };
    return id;
}

int Tape::l2_norm_rows(int a) {
    Mat v(value(a).rows(), 1);
    for (int r = 0; r < v.rows(); ++r) v(r, 0) = value(a).row(r).norm();
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        const Mat& n = nodes_[static_cast<size_t>(id)].value;
        Mat& ga = grad_of(a);
        for (int r = 0; r < n.rows(); ++r) {
            if (n(r, 0) > 0.0) ga.row(r) += (g(r, 0) / n(r, 0)) * value(a).row(r);
        }
    };
    return id;
}

int Tape::layer_norm(int a, int gain, int bias) {
    constexpr double kEps = 1e-5;
    const Mat& x = value(a);
    int rows = static_cast<int>(x.rows()), cols = static_cast<int>(x.cols());
    Mat xhat(rows, cols);
    Eigen::VectorXd inv_sigma(rows);
    for (int r = 0; r < rows; ++r) {
        double mu = x.row(r).mean();
        double var = (x.row(r).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + kEps);
        inv_sigma(r) = is;
        xhat.row(r) = (x.row(r).array() - mu) * is;
    }
    Mat v = (xhat.array().rowwise() * value(gain).row(0).array()).matrix();
    v.rowwise() += value(bias).row(0);
    int id = push(std::move(v), needs(a) || needs(gain) || needs(bias));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, gain, bias, xhat = std::move(xhat),
                                           inv_sigma = std::move(inv_sigma)] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        if (needs(gain)) grad_of(gain) += g.cwiseProduct(xhat).colwise().sum();
        if (needs(bias)) grad_of(bias) += g.colwise().sum();
        if (needs(a)) {
            Mat gy = (g.array().rowwise() * value(gain).row(0).array()).matrix();
            double n = static_cast<double>(g.cols());
            Mat& ga = grad_of(a);
            for (int r = 0; r < g.rows(); ++r) {
                double mean_gy = gy.row(r).mean();
                double mean_gyx = gy.row(r).cwiseProduct(xhat.row(r)).mean() ;
                ga.row(r) += (inv_sigma(r) * (gy.row(r).array() - mean_gy - xhat.row(r).array() * mean_gyx)).matrix();
                (void)n;
            }
        }
    };
    return id;
}

int Tape::segment_softmax(int logits, const std::vector<int>& seg, int nseg) {
    const Mat& x = value(logits);
    if (x.cols() != 1) throw Error("segment_softmax expects a column");
    std::vector<double> mx(static_cast<size_t>(nseg), -1e300);
    for (int i = 0; i < x.rows(); ++i) mx[static_cast<size_t>(seg[static_cast<size_t>(i)])] =
        std::max(mx[static_cast<size_t>(seg[static_cast<size_t>(i)])], x(i, 0));
    Mat v(x.rows(), 1);
    std::vector<double> z(static_cast<size_t>(nseg), 0.0);
    for (int i = 0; i < x.rows(); ++i) {
        v(i, 0) = std::exp(x(i, 0) - mx[static_cast<size_t>(seg[static_cast<size_t>(i)])]);
        z[static_cast<size_t>(seg[static_cast<size_t>(i)])] += v(i, 0);
    }
    for (int i = 0; i < x.rows(); ++i) v(i, 0) /= z[static_cast<size_t>(seg[static_cast<size_t>(i)])];
    int id = push(std::move(v), needs(logits));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, logits, seg, nseg] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        const Mat& p = nodes_[static_cast<size_t>(id)].value;
        std::vector<double> dot(static_cast<size_t>(nseg), 0.0);
        for (int i = 0; i < p.rows(); ++i)
            dot[static_cast<size_t>(seg[static_cast<size_t>(i)])] += g(i, 0) * p(i, 0);
        Mat& ga = grad_of(logits);
        for (int i = 0; i < p.rows(); ++i)
            ga(i, 0) += p(i, 0) * (g(i, 0) - dot[static_cast<size_t>(seg[static_cast<size_t>(i)])]);
    };
    return id;
}

int Tape::segment_sum(int a, const std::vector<int>& seg, int nseg) {
    const Mat& x = value(a);
    Mat v = Mat::Zero(nseg, x.cols());
    for (int i = 0; i < x.rows(); ++i) v.row(seg[static_cast<size_t>(i)]) += x.row(i);
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, seg] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        Mat& ga = grad_of(a);
        for (int i = 0; i < ga.rows(); ++i) ga.row(i) += g.row(seg[static_cast<size_t>(i)]);
    };
    return id;
}

int Tape::segment_mean(int a, const std::vector<int>& seg, int nseg) {
    const Mat& x = value(a);
    std::vector<double> cnt(static_cast<size_t>(nseg), 0.0);
    for (int i = 0; i < x.rows(); ++i) cnt[static_cast<size_t>(seg[static_cast<size_t>(i)])] += 1.0;
    Mat v = Mat::Zero(nseg, x.cols());
    for (int i = 0; i < x.rows(); ++i)
        v.row(seg[static_cast<size_t>(i)]) += x.row(i) / cnt[static_cast<size_t>(seg[static_cast<size_t>(i)])];
    int id = push(std::move(v), needs(a));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, a, seg, cnt = std::move(cnt)] {
        const Mat& g = nodes_[static_cast<size_t>(id)].grad;
        Mat& ga = grad_of(a);
        for (int i = 0; i < ga.rows(); ++i)
            ga.row(i) += g.row(seg[static_cast<size_t>(i)]) / cnt[static_cast<size_t>(seg[static_cast<size_t>(i)])];
    };
    return id;
}

int Tape::nll_row(int scores, int row, int target) {
    const Mat& s = value(scores);
    if (row < 0 || row >= s.rows() || target < 0 || target >= s.cols())
        throw Error("nll_row index out of range");
    double mx = s.row(row).maxCoeff();
    double lse = std::log((s.row(row).array() - mx).exp().sum()) + mx;
    Mat v(1, 1);
    v(0, 0) = lse - s(row, target);
    int id = push(std::move(v), needs(scores));
    nodes_[static_cast<size_t>(id)].bwd = [this, id, scores, row, target, mx, lse] {
        double g = nodes_[static_cast<size_t>(id)].grad(0, 0);
        const Mat& s = value(scores);
        Mat& gs = grad_of(scores);
        (void)mx;
        for (int c = 0; c < s.cols(); ++c) {
            double p = std::exp(s(row, c) - lse);
            gs(row, c) += g * (p - (c == target ? 1.0 : 0.0));
        }
    };
    return id;
}

void Tape::run_backward(int from) {
    for (int i = from; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.needs_grad && n.grad.size() != 0 && n.bwd) n.bwd();
    }
}

void Tape::backward(int root) {
    const Mat& v = value(root);
    if (v.rows() != 1 || v.cols() != 1) throw Error("backward root must be scalar");
    grad_of(root)(0, 0) += 1.0;
    run_backward(root);
}

void Tape::backward_seeded(int node, const Mat& seed) {
    if (seed.rows() != value(node).rows() || seed.cols() != value(node).cols())
        throw Error("backward_seeded shape mismatch");
    grad_of(node) += seed;
    run_backward(node);
}

// ---------------------------------------------------------------------------

double softmax_nll(const Mat& scores, int positive_index) {
    if (scores.size() == 0) throw Error("softmax_nll on empty scores");
    if (positive_index < 0 || positive_index >= scores.size())
        throw Error("softmax_nll positive index out of range");
    Eigen::Map<const Eigen::ArrayXd> s(scores.data(), scores.size());
    double mx = s.maxCoeff();
    double lse = std::log((s - mx).exp().sum()) + mx;
    return lse - s(positive_index);
}

GradCheckReport grad_check(ParamStore& store,
                           const std::function<double(bool with_grad)>& loss,
                           double eps, int coords_per_param, uint64_t seed) {
    store.zero_grads();
    loss(true);
    // Snapshot analytic grads before probing.
    std::vector<Mat> analytic;
    analytic.reserve(store.size());
    for (size_t i = 0; i < store.size(); ++i) analytic.push_back(store.by_index(static_cast<int>(i)).grad);

    Rng rng(seed ^ 0x5eedc0de);
    GradCheckReport rep;
    for (size_t pi = 0; pi < store.size(); ++pi) {
        Param& p = store.by_index(static_cast<int>(pi));
        int n = static_cast<int>(p.value.size());
        if (n == 0) continue;
        int k = std::min(coords_per_param, n);
        for (int s = 0; s < k; ++s) {
            int idx = static_cast<int>(rng.below(n));
            int r = idx / static_cast<int>(p.value.cols());
            int c = idx % static_cast<int>(p.value.cols());
            double orig = p.value(r, c);
            p.value(r, c) = orig + eps;
            double lp = loss(false);
            p.value(r, c) = orig - eps;
            double lm = loss(false);
            p.value(r, c) = orig;
            double fd = (lp - lm) / (2.0 * eps);
            double an = analytic[pi](r, c);
            double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-4);
            ++rep.coords_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p.name;
            }
        }
    }
    return rep;
}

}  // namespace kgqr::nn
