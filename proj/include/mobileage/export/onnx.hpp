#pragma once

// Portable graph stage: ONNX ModelProto (opset 17) written from the in-repo
// Graph, read back into a flat node list, and executed by a reference NCHW
// interpreter.

#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "mobileage/error.hpp"
#include "mobileage/export/protobuf.hpp"
#include "mobileage/nn/graph.hpp"
#include "mobileage/nn/kernels.hpp"
#include "mobileage/tensor.hpp"

namespace mobileage::onnx {

inline constexpr std::int64_t kIrVersion = 8;
inline constexpr std::int64_t kOpset = 17;

struct Attr {
    enum Kind { Float = 1, Int = 2, Ints = 7 } kind = Int;
    float f = 0.0F;
    std::int64_t i = 0;
    std::vector<std::int64_t> ints;
};

struct Node {
    std::string name;
    std::string op_type;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::map<std::string, Attr> attrs;

    [[nodiscard]] std::int64_t int_attr(const std::string& k, std::int64_t dflt) const
    {
        const auto it = attrs.find(k);
        return it == attrs.end() ? dflt : it->second.i;
    }
    [[nodiscard]] float float_attr(const std::string& k, float dflt) const
    {
        const auto it = attrs.find(k);
        return it == attrs.end() ? dflt : it->second.f;
    }
    [[nodiscard]] std::vector<std::int64_t> ints_attr(const std::string& k) const
    {
        const auto it = attrs.find(k);
        return it == attrs.end() ? std::vector<std::int64_t>{} : it->second.ints;
    }
};

struct Model {
    std::int64_t ir_version = kIrVersion;
    std::int64_t opset = kOpset;
    std::string producer = "mobileage";
    std::string input;
    Shape input_shape; // -1 marks the dynamic batch dimension
    std::string output;
    std::vector<Node> nodes;
    TensorMap initializers;
    std::map<std::string, std::string> metadata;
};

// ---------------------------------------------------------------------------
// Graph -> Model

inline Attr ints(std::vector<std::int64_t> v) { return {Attr::Ints, 0.0F, 0, std::move(v)}; }
inline Attr int1(std::int64_t v) { return {Attr::Int, 0.0F, v, {}}; }
inline Attr float1(float v) { return {Attr::Float, v, 0, {}}; }

/// Lowers the in-repo graph to ONNX operators. The bounded output becomes
/// Sigmoid, Mul, Add and a Clip into the open output interval.
inline Model from_graph(const Graph& g, std::map<std::string, std::string> metadata = {})
{
    Model m;
    m.input = g.input;
    m.input_shape = g.input_shape;
    m.initializers = g.initializers;
    m.metadata = std::move(metadata);
    int counter = 0;
    auto push = [&](std::string op, std::vector<std::string> in, std::string out, std::map<std::string, Attr> attrs = {}) {
        m.nodes.push_back({"n" + std::to_string(counter++) + "_" + op, std::move(op), std::move(in), {std::move(out)}, std::move(attrs)});
    };
    for (const auto& n : g.nodes) {
        const auto w = [&](const char* role) { return n.weights.at(role); };
        if (n.op == "Conv") {
            const auto k = n.attrs.at("kernel").get<std::int64_t>(), s = n.attrs.at("stride").get<std::int64_t>(),
                       p = n.attrs.at("pad").get<std::int64_t>();
            std::vector<std::string> in{n.inputs.at(0), w("weight")};
            if (n.weights.contains("bias")) in.push_back(w("bias"));
            push("Conv", in, n.output,
                 {{"kernel_shape", ints({k, k})}, {"strides", ints({s, s})}, {"pads", ints({p, p, p, p})},
                  {"dilations", ints({1, 1})}, {"group", int1(n.attrs.at("groups").get<std::int64_t>())}});
        } else if (n.op == "BatchNormalization") {
            push("BatchNormalization", {n.inputs.at(0), w("scale"), w("bias"), w("mean"), w("var")}, n.output,
                 {{"epsilon", float1(n.attrs.at("epsilon").get<float>())}});
        } else if (n.op == "HardSigmoid") {
            push("HardSigmoid", n.inputs, n.output, {{"alpha", float1(1.0F / 6.0F)}, {"beta", float1(0.5F)}});
        } else if (n.op == "HardSwish" || n.op == "Relu" || n.op == "Mul" || n.op == "Add" || n.op == "GlobalAveragePool") {
            push(n.op, n.inputs, n.output);
        } else if (n.op == "Flatten") {
            push("Flatten", n.inputs, n.output, {{"axis", int1(1)}});
        } else if (n.op == "Gemm") {
            push("Gemm", {n.inputs.at(0), w("weight"), w("bias")}, n.output,
                 {{"transB", int1(1)}, {"alpha", float1(1.0F)}, {"beta", float1(1.0F)}});
        } else if (n.op == "BoundedSigmoid") {
            const auto lo = n.attrs.at("min").get<float>(), hi = n.attrs.at("max").get<float>();
            m.initializers["age/range"] = Tensor({1}, {hi - lo});
            m.initializers["age/min"] = Tensor({1}, {lo});
            m.initializers["age/clip_lo"] = Tensor({}, {std::nextafter(lo, hi)});
            m.initializers["age/clip_hi"] = Tensor({}, {std::nextafter(hi, lo)});
            const auto base = n.output;
            push("Sigmoid", n.inputs, base + "_sig");
            push("Mul", {base + "_sig", "age/range"}, base + "_scaled");
            push("Add", {base + "_scaled", "age/min"}, base + "_shift");
            push("Clip", {base + "_shift", "age/clip_lo", "age/clip_hi"}, n.output);
        } else {
            throw DataError("unsupported operator '" + n.op + "' in portable-graph export");
        }
    }
    m.output = g.output;
    return m;
}

// ---------------------------------------------------------------------------
// Encoding

namespace detail {

inline pb::Writer encode_tensor(const std::string& name, const Tensor& t)
{
    pb::Writer w;
    for (auto d : t.shape()) w.int_field(1, d);
    w.int_field(2, 1); // FLOAT
    w.bytes_field(8, name);
    w.bytes_field(9, std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float)));
    return w;
}

inline pb::Writer encode_value_info(const std::string& name, const Shape& shape)
{
    pb::Writer shp;
    for (auto d : shape) {
        pb::Writer dim;
        if (d < 0)
            dim.bytes_field(2, "batch");
        else
            dim.int_field(1, d);
        shp.message_field(1, dim);
    }
    pb::Writer tensor_type;
    tensor_type.int_field(1, 1);
    tensor_type.message_field(2, shp);
    pb::Writer type;
    type.message_field(1, tensor_type);
    pb::Writer vi;
    vi.bytes_field(1, name);
    vi.message_field(2, type);
    return vi;
}

inline pb::Writer encode_node(const Node& n)
{
    pb::Writer w;
    for (const auto& i : n.inputs) w.bytes_field(1, i);
    for (const auto& o : n.outputs) w.bytes_field(2, o);
    w.bytes_field(3, n.name);
    w.bytes_field(4, n.op_type);
    for (const auto& [k, a] : n.attrs) {
        pb::Writer aw;
        aw.bytes_field(1, k);
        switch (a.kind) {
        case Attr::Float: aw.float_field(2, a.f); break;
        case Attr::Int: aw.int_field(3, a.i); break;
        case Attr::Ints:
            for (auto v : a.ints) aw.int_field(8, v);
            break;
        }
        aw.int_field(20, a.kind);
        w.message_field(5, aw);
    }
    return w;
}

inline Tensor decode_tensor(std::string_view bytes, std::string& name)
{
    pb::Reader r(bytes);
    Shape dims;
    std::string_view raw;
    std::vector<float> floats;
    std::int64_t dtype = 0;
    while (!r.done()) {
        const auto f = r.next();
        switch (f.number) {
        case 1: pb::Reader::append_ints(f, dims); break;
        case 2: dtype = f.as_int(); break;
        case 4:
            if (f.type == pb::Fixed32)
                floats.push_back(f.as_float());
            else
                for (std::size_t i = 0; i + 4 <= f.bytes.size(); i += 4) {
                    float v;
                    std::memcpy(&v, f.bytes.data() + i, 4);
                    floats.push_back(v);
                }
            break;
        case 8: name = f.str(); break;
        case 9: raw = f.bytes; break;
        default: break;
        }
    }
    if (dtype != 1) throw DataError("initializer " + name + ": only float32 tensors are supported (data_type " + std::to_string(dtype) + ")");
    if (!raw.empty()) {
        floats.resize(raw.size() / sizeof(float));
        std::memcpy(floats.data(), raw.data(), floats.size() * sizeof(float));
    }
    if (static_cast<std::int64_t>(floats.size()) != shape_numel(dims))
        throw DataError("initializer " + name + ": " + std::to_string(floats.size()) + " values for shape " + shape_str(dims));
    return Tensor(dims, std::move(floats));
}

inline Node decode_node(std::string_view bytes)
{
    Node n;
    pb::Reader r(bytes);
    while (!r.done()) {
        const auto f = r.next();
        switch (f.number) {
        case 1: n.inputs.push_back(f.str()); break;
        case 2: n.outputs.push_back(f.str()); break;
        case 3: n.name = f.str(); break;
        case 4: n.op_type = f.str(); break;
        case 5: {
            pb::Reader ar(f.bytes);
            std::string key;
            Attr a;
            while (!ar.done()) {
                const auto af = ar.next();
                switch (af.number) {
                case 1: key = af.str(); break;
                case 2: a.f = af.as_float(); break;
                case 3: a.i = af.as_int(); break;
                case 8: pb::Reader::append_ints(af, a.ints); break;
                case 20: a.kind = static_cast<Attr::Kind>(af.as_int()); break;
                default: break;
                }
            }
            n.attrs[key] = a;
            break;
        }
        default: break;
        }
    }
    return n;
}

inline std::pair<std::string, Shape> decode_value_info(std::string_view bytes)
{
    std::string name;
    Shape shape;
    pb::Reader r(bytes);
    while (!r.done()) {
        const auto f = r.next();
        if (f.number == 1) name = f.str();
        if (f.number != 2) continue;
        pb::Reader tr(f.bytes);
        while (!tr.done()) {
            const auto tf = tr.next();
            if (tf.number != 1) continue;
            pb::Reader tt(tf.bytes);
            while (!tt.done()) {
                const auto sf = tt.next();
                if (sf.number != 2) continue;
                pb::Reader sr(sf.bytes);
                while (!sr.done()) {
                    const auto df = sr.next();
                    if (df.number != 1) continue;
                    pb::Reader dr(df.bytes);
                    std::int64_t d = -1;
                    while (!dr.done()) {
                        const auto x = dr.next();
                        if (x.number == 1) d = x.as_int();
                    }
                    shape.push_back(d);
                }
            }
        }
    }
    return {name, shape};
}

} // namespace detail

/// Serialized ModelProto. Deterministic: initializers and metadata are
/// emitted in sorted order and no timestamps are written.
inline std::string serialize(const Model& m)
{
    pb::Writer graph;
    for (const auto& n : m.nodes) graph.message_field(1, detail::encode_node(n));
    graph.bytes_field(2, "age_estimator");
    for (const auto& [name, t] : m.initializers) graph.message_field(5, detail::encode_tensor(name, t));
    graph.message_field(11, detail::encode_value_info(m.input, m.input_shape));
    graph.message_field(12, detail::encode_value_info(m.output, {m.input_shape.empty() ? -1 : m.input_shape[0], 1}));

    pb::Writer model;
    model.int_field(1, m.ir_version);
    model.bytes_field(2, m.producer);
    model.message_field(7, graph);
    pb::Writer opset;
    opset.bytes_field(1, "");
    opset.int_field(2, m.opset);
    model.message_field(8, opset);
    for (const auto& [k, v] : m.metadata) {
        pb::Writer e;
        e.bytes_field(1, k);
        e.bytes_field(2, v);
        model.message_field(14, e);
    }
    return model.bytes();
}

inline Model parse(std::string_view bytes)
{
    Model m;
    m.producer.clear();
    pb::Reader r(bytes);
    while (!r.done()) {
        const auto f = r.next();
        switch (f.number) {
        case 1: m.ir_version = f.as_int(); break;
        case 2: m.producer = f.str(); break;
        case 7: {
            pb::Reader gr(f.bytes);
            while (!gr.done()) {
                const auto gf = gr.next();
                if (gf.number == 1) {
                    m.nodes.push_back(detail::decode_node(gf.bytes));
                } else if (gf.number == 5) {
                    std::string name;
                    auto t = detail::decode_tensor(gf.bytes, name);
                    m.initializers[name] = std::move(t);
                } else if (gf.number == 11) {
                    auto [name, shape] = detail::decode_value_info(gf.bytes);
                    if (!m.initializers.contains(name) && m.input.empty()) {
                        m.input = name;
                        m.input_shape = shape;
                    }
                } else if (gf.number == 12) {
                    m.output = detail::decode_value_info(gf.bytes).first;
                }
            }
            break;
        }
        case 8: {
            pb::Reader orr(f.bytes);
            while (!orr.done()) {
                const auto of = orr.next();
                if (of.number == 2) m.opset = of.as_int();
            }
            break;
        }
        case 14: {
            pb::Reader er(f.bytes);
            std::string k, v;
            while (!er.done()) {
                const auto ef = er.next();
                if (ef.number == 1) k = ef.str();
                if (ef.number == 2) v = ef.str();
            }
            m.metadata[k] = v;
            break;
        }
        default: break;
        }
    }
    if (m.input.empty() || m.output.empty()) throw DataError("ONNX model has no graph input or output");
    return m;
}

// ---------------------------------------------------------------------------
// Reference interpreter

/// Executes a parsed model node by node in NCHW layout.
class Interpreter {
public:
    explicit Interpreter(Model m) : m_(std::move(m))
    {
        static const std::vector<std::string> supported{"Conv",    "BatchNormalization", "HardSwish", "HardSigmoid", "Relu", "Mul",
                                                        "Add",     "GlobalAveragePool",  "Flatten",   "Gemm",        "Sigmoid", "Clip"};
        for (const auto& n : m_.nodes)
            if (std::find(supported.begin(), supported.end(), n.op_type) == supported.end())
                throw DataError("unsupported operator '" + n.op_type + "' in portable graph (node " + n.name + ")");
    }

    [[nodiscard]] const Model& model() const noexcept { return m_; }

    Tensor run(const Tensor& input) const
    {
        if (input.rank() != 4 || input.dim(1) != m_.input_shape.at(1) || input.dim(2) != m_.input_shape.at(2) ||
            input.dim(3) != m_.input_shape.at(3))
            throw ConfigError("portable graph expects input " + shape_str(m_.input_shape) + ", got " + shape_str(input.shape()));
        std::map<std::string, Tensor> vals;
        vals[m_.input] = input;
        auto get = [&](const std::string& name) -> const Tensor& {
            if (auto it = vals.find(name); it != vals.end()) return it->second;
            if (auto it = m_.initializers.find(name); it != m_.initializers.end()) return it->second;
            throw DataError("portable graph references undefined value " + name);
        };
        for (const auto& n : m_.nodes) {
            vals[n.outputs.at(0)] = exec(n, get);
            // Values are single-use except for residual and gating inputs;
            // keep everything, the graph is small.
        }
        return get(m_.output);
    }

private:
    template <class Get>
    static Tensor exec(const Node& n, Get& get)
    {
        const auto& op = n.op_type;
        const Tensor& x = get(n.inputs.at(0));
        if (op == "Conv") return conv(n, x, get(n.inputs.at(1)), n.inputs.size() > 2 ? &get(n.inputs[2]) : nullptr);
        if (op == "BatchNormalization") {
            const auto& s = get(n.inputs[1]);
            const auto& b = get(n.inputs[2]);
            const auto& mu = get(n.inputs[3]);
            const auto& var = get(n.inputs[4]);
            const float eps = n.float_attr("epsilon", 1e-5F);
            Tensor y(x.shape());
            const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t c = 0; c < C; ++c) {
                    const float inv = 1.0F / std::sqrt(var[c] + eps);
                    const float* src = x.data() + (i * C + c) * HW;
                    float* dst = y.data() + (i * C + c) * HW;
                    for (std::int64_t k = 0; k < HW; ++k) dst[k] = (src[k] - mu[c]) * inv * s[c] + b[c];
                }
            return y;
        }
        if (op == "HardSwish") return map(x, [](float v) { return v * std::clamp(v + 3.0F, 0.0F, 6.0F) / 6.0F; });
        if (op == "HardSigmoid") {
            const float a = n.float_attr("alpha", 0.2F), b = n.float_attr("beta", 0.5F);
            return map(x, [a, b](float v) { return std::clamp(a * v + b, 0.0F, 1.0F); });
        }
        if (op == "Relu") return map(x, [](float v) { return std::max(v, 0.0F); });
        if (op == "Sigmoid") return map(x, [](float v) { return 1.0F / (1.0F + std::exp(-v)); });
        if (op == "Clip") {
            const float lo = get(n.inputs.at(1))[0], hi = get(n.inputs.at(2))[0];
            return map(x, [lo, hi](float v) { return std::clamp(v, lo, hi); });
        }
        if (op == "Mul" || op == "Add") return broadcast(x, get(n.inputs.at(1)), op == "Mul");
        if (op == "GlobalAveragePool") {
            const auto N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
            Tensor y({N, C, 1, 1});
            for (std::int64_t i = 0; i < N * C; ++i) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < HW; ++k) acc += x.data()[i * HW + k];
                y.data()[i] = static_cast<float>(acc / static_cast<double>(HW));
            }
            return y;
        }
        if (op == "Flatten") return x.reshaped({x.dim(0), static_cast<std::int64_t>(x.size()) / x.dim(0)});
        if (op == "Gemm") {
            const auto& w = get(n.inputs.at(1));
            const auto& b = get(n.inputs.at(2));
            const auto N = x.dim(0), K = x.dim(1), M = w.dim(0);
            if (w.dim(1) != K) throw DataError("Gemm " + n.name + ": inner dimension mismatch");
            Tensor y({N, M});
            for (std::int64_t i = 0; i < N; ++i)
                for (std::int64_t o = 0; o < M; ++o) {
                    double acc = b[o];
                    for (std::int64_t k = 0; k < K; ++k) acc += static_cast<double>(x.data()[i * K + k]) * w.data()[o * K + k];
                    y.data()[i * M + o] = static_cast<float>(acc);
                }
            return y;
        }
        throw DataError("unsupported operator '" + op + "'");
    }

    template <class F>
    static Tensor map(const Tensor& x, F f)
    {
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = f(x.data()[i]);
        return y;
    }

    /// Elementwise with numpy broadcasting restricted to the shapes the
    /// exporter produces: equal shapes, per-(N,C) gates [N,C,1,1], scalars.
    static Tensor broadcast(const Tensor& a, const Tensor& b, bool mul)
    {
        Tensor y(a.shape());
        const auto op = [mul](float u, float v) { return mul ? u * v : u + v; };
        if (a.shape() == b.shape()) {
            for (std::size_t i = 0; i < a.size(); ++i) y.data()[i] = op(a.data()[i], b.data()[i]);
        } else if (b.size() == 1) {
            for (std::size_t i = 0; i < a.size(); ++i) y.data()[i] = op(a.data()[i], b[0]);
        } else if (a.rank() == 4 && b.rank() == 4 && b.dim(0) == a.dim(0) && b.dim(1) == a.dim(1) && b.dim(2) == 1 && b.dim(3) == 1) {
            const auto HW = a.dim(2) * a.dim(3);
            for (std::int64_t i = 0; i < a.dim(0) * a.dim(1); ++i)
                for (std::int64_t k = 0; k < HW; ++k) y.data()[i * HW + k] = op(a.data()[i * HW + k], b.data()[i]);
        } else {
            throw DataError("unsupported broadcast " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
        }
        return y;
    }

    static Tensor conv(const Node& n, const Tensor& x, const Tensor& w, const Tensor* bias)
    {
        const auto k = n.ints_attr("kernel_shape");
        const auto s = n.ints_attr("strides");
        const auto p = n.ints_attr("pads");
        const auto d = n.ints_attr("dilations");
        for (auto v : d)
            if (v != 1) throw DataError("Conv " + n.name + ": dilation is not supported");
        if (k.size() != 2 || k[0] != k[1] || s.size() != 2 || s[0] != s[1] || p.size() != 4 ||
            !(p[0] == p[1] && p[1] == p[2] && p[2] == p[3]))
            throw DataError("Conv " + n.name + ": only square kernels, strides and symmetric padding are supported");
        kernels::ConvGeometry g;
        g.in_channels = static_cast<int>(x.dim(1));
        g.out_channels = static_cast<int>(w.dim(0));
        g.kernel = static_cast<int>(k[0]);
        g.stride = static_cast<int>(s[0]);
        g.pad = static_cast<int>(p[0]);
        g.groups = static_cast<int>(n.int_attr("group", 1));
        g.in_h = static_cast<int>(x.dim(2));
        g.in_w = static_cast<int>(x.dim(3));
        const std::int64_t N = x.dim(0), OH = g.out_h(), OW = g.out_w();
        Tensor y({N, g.out_channels, OH, OW});
        const auto in_per = static_cast<std::size_t>(g.in_channels) * g.in_h * g.in_w;
        const auto out_per = static_cast<std::size_t>(g.out_channels) * OH * OW;
        std::vector<float> col;
        const bool dw = g.groups == g.in_channels && g.groups == g.out_channels;
        if (!dw && g.groups != 1) throw DataError("Conv " + n.name + ": grouped convolution with groups=" + std::to_string(g.groups) + " is not supported");
        if (!dw && g.kernel != 1) col.resize(static_cast<std::size_t>(g.in_channels) * g.kernel * g.kernel * OH * OW);
        for (std::int64_t i = 0; i < N; ++i) {
            const float* in = x.data() + i * in_per;
            float* out = y.data() + i * out_per;
            if (dw)
                kernels::depthwise_forward(in, w.data(), g, out);
            else
                kernels::dense_forward(in, w.data(), g, out, col.data());
            if (bias)
                for (int c = 0; c < g.out_channels; ++c)
                    for (std::int64_t q = 0; q < OH * OW; ++q) out[c * OH * OW + q] += (*bias)[c];
        }
        return y;
    }

    Model m_;
};

} // namespace mobileage::onnx
