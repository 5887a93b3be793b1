#pragma once

// Deployment stage: a flat binary model converted from the portable graph.
// Batch norm is folded into the preceding convolution, activations are fused
// into their producers, and all activations are NHWC. The runtime below has
// its own kernels and shares no code with the portable interpreter.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mobileage/error.hpp"
#include "mobileage/export/onnx.hpp"
#include "mobileage/tensor.hpp"

namespace mobileage::flat {

inline constexpr char kMagic[8] = {'M', 'A', 'G', 'E', 'F', 'B', '0', '1'};
inline constexpr std::uint32_t kVersion = 1;

enum class OpCode : std::uint32_t { Conv2d = 1, DepthwiseConv2d, Mean, Mul, Add, FullyConnected, Logistic, MulConst, AddConst, Clamp, Activation, Reshape };
enum class Fused : std::uint32_t { None = 0, Relu, HardSwish, HardSigmoid };

inline const char* opcode_name(OpCode c)
{
    switch (c) {
    case OpCode::Conv2d: return "CONV_2D";
    case OpCode::DepthwiseConv2d: return "DEPTHWISE_CONV_2D";
    case OpCode::Mean: return "MEAN";
    case OpCode::Mul: return "MUL";
    case OpCode::Add: return "ADD";
    case OpCode::FullyConnected: return "FULLY_CONNECTED";
    case OpCode::Logistic: return "LOGISTIC";
    case OpCode::MulConst: return "MUL_CONST";
    case OpCode::AddConst: return "ADD_CONST";
    case OpCode::Clamp: return "CLAMP";
    case OpCode::Activation: return "ACTIVATION";
    case OpCode::Reshape: return "RESHAPE";
    }
    return "?";
}

/// Fixed-size operator record.
struct Op {
    OpCode code = OpCode::Reshape;
    Fused act = Fused::None;
    std::int32_t kernel = 0;
    std::int32_t stride = 1;
    std::int32_t pad = 0;
    std::int32_t in0 = -1;    // value slot
    std::int32_t in1 = -1;    // value slot
    std::int32_t out = -1;    // value slot
    std::int32_t weight = -1; // constant index
    std::int32_t bias = -1;   // constant index
    float f0 = 0.0F;
    float f1 = 0.0F;
};
static_assert(sizeof(Op) == 48);

struct Constant {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Model {
    std::vector<Constant> constants;
    std::vector<Op> ops;
    std::int32_t slots = 0;
    std::int32_t input_slot = 0;
    std::int32_t output_slot = 0;
    std::int32_t input_channels = 3;
    std::int32_t input_size = 224;
    std::string metadata; // free-form JSON text
};

// ---------------------------------------------------------------------------
// Conversion

namespace detail {

inline Fused fused_of(const onnx::Node& n)
{
    if (n.op_type == "Relu") return Fused::Relu;
    if (n.op_type == "HardSwish") return Fused::HardSwish;
    if (n.op_type == "HardSigmoid") {
        if (std::abs(n.float_attr("alpha", 0.2F) - 1.0F / 6.0F) > 1e-7F || n.float_attr("beta", 0.5F) != 0.5F)
            throw DataError("HardSigmoid " + n.name + ": only alpha=1/6, beta=0.5 can be fused");
        return Fused::HardSigmoid;
    }
    return Fused::None;
}

} // namespace detail

/// Converts a portable graph. Fails with the operator name on anything the
/// deployment runtime cannot execute.
inline Model convert(const onnx::Model& src, std::string metadata = "{}")
{
    Model out;
    out.metadata = std::move(metadata);
    out.input_channels = static_cast<std::int32_t>(src.input_shape.at(1));
    out.input_size = static_cast<std::int32_t>(src.input_shape.at(2));

    std::map<std::string, int> uses;
    for (const auto& n : src.nodes)
        for (const auto& i : n.inputs) ++uses[i];
    ++uses[src.output];

    std::map<std::string, std::int32_t> slot;
    auto slot_of = [&](const std::string& v) {
        auto it = slot.find(v);
        if (it == slot.end()) throw DataError("deployment conversion: value " + v + " used before definition");
        return it->second;
    };
    auto new_slot = [&](const std::string& v) { return slot[v] = out.slots++; };
    auto constant = [&](std::string name, Shape shape, std::vector<float> data) {
        out.constants.push_back({std::move(name), std::move(shape), std::move(data)});
        return static_cast<std::int32_t>(out.constants.size() - 1);
    };
    auto init = [&](const std::string& name) -> const Tensor& {
        const auto it = src.initializers.find(name);
        if (it == src.initializers.end()) throw DataError("deployment conversion: " + name + " is not a constant");
        return it->second;
    };
    auto is_const = [&](const std::string& name) { return src.initializers.contains(name); };

    out.input_slot = new_slot(src.input);
    const auto& nodes = src.nodes;
    // The next node consumes `v` exclusively.
    auto fusable = [&](std::size_t next, const std::string& v) {
        return next < nodes.size() && nodes[next].inputs.at(0) == v && uses[v] == 1;
    };

    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        Op op;
        if (n.op_type == "Conv") {
            const auto& w = init(n.inputs.at(1));
            const auto O = w.dim(0), I = w.dim(1), K = w.dim(2);
            const auto group = n.int_attr("group", 1);
            const auto pads = n.ints_attr("pads");
            const auto strides = n.ints_attr("strides");
            for (auto d : n.ints_attr("dilations"))
                if (d != 1) throw DataError("Conv " + n.name + ": dilation is not supported by the deployment runtime");
            if (pads.size() != 4 || strides.size() != 2 || w.dim(2) != w.dim(3))
                throw DataError("Conv " + n.name + ": unsupported geometry");
            std::vector<double> scale(O, 1.0), shift(O, 0.0);
            if (n.inputs.size() > 2) {
                const auto& b = init(n.inputs[2]);
                for (std::int64_t o = 0; o < O; ++o) shift[o] = b[o];
            }
            std::string v = n.outputs.at(0);
            if (fusable(i + 1, v) && nodes[i + 1].op_type == "BatchNormalization") {
                const auto& bn = nodes[++i];
                const auto& g = init(bn.inputs[1]);
                const auto& be = init(bn.inputs[2]);
                const auto& mu = init(bn.inputs[3]);
                const auto& var = init(bn.inputs[4]);
                const double eps = bn.float_attr("epsilon", 1e-5F);
                for (std::int64_t o = 0; o < O; ++o) {
                    const double s = g[o] / std::sqrt(static_cast<double>(var[o]) + eps);
                    shift[o] = (shift[o] - mu[o]) * s + be[o];
                    scale[o] = s;
                }
                v = bn.outputs.at(0);
            }
            if (fusable(i + 1, v) && detail::fused_of(nodes[i + 1]) != Fused::None) {
                op.act = detail::fused_of(nodes[++i]);
                v = nodes[i].outputs.at(0);
            }
            std::vector<float> bias(O);
            for (std::int64_t o = 0; o < O; ++o) bias[o] = static_cast<float>(shift[o]);
            op.kernel = static_cast<std::int32_t>(K);
            op.stride = static_cast<std::int32_t>(strides[0]);
            op.pad = static_cast<std::int32_t>(pads[0]);
            op.in0 = slot_of(n.inputs[0]);
            if (group == 1) {
                // OIHW -> OHWI
                std::vector<float> wt(w.size());
                for (std::int64_t o = 0; o < O; ++o)
                    for (std::int64_t c = 0; c < I; ++c)
                        for (std::int64_t ky = 0; ky < K; ++ky)
                            for (std::int64_t kx = 0; kx < K; ++kx)
                                wt[((o * K + ky) * K + kx) * I + c] =
                                    static_cast<float>(w.data()[((o * I + c) * K + ky) * K + kx] * scale[o]);
                op.code = OpCode::Conv2d;
                op.weight = constant(n.name + "/weight", {O, K, K, I}, std::move(wt));
            } else if (group == O && I == 1) {
                // [C,1,K,K] -> [K,K,C]
                std::vector<float> wt(w.size());
                for (std::int64_t c = 0; c < O; ++c)
                    for (std::int64_t k = 0; k < K * K; ++k) wt[k * O + c] = static_cast<float>(w.data()[c * K * K + k] * scale[c]);
                op.code = OpCode::DepthwiseConv2d;
                op.weight = constant(n.name + "/weight", {K, K, O}, std::move(wt));
            } else {
                throw DataError("Conv " + n.name + ": grouped convolution (group=" + std::to_string(group) + ") is not supported");
            }
            op.bias = constant(n.name + "/bias", {O}, std::move(bias));
            op.out = new_slot(v);
        } else if (n.op_type == "GlobalAveragePool") {
            op.code = OpCode::Mean;
            op.in0 = slot_of(n.inputs.at(0));
            op.out = new_slot(n.outputs.at(0));
        } else if (n.op_type == "Flatten") {
            op.code = OpCode::Reshape;
            op.in0 = slot_of(n.inputs.at(0));
            op.out = new_slot(n.outputs.at(0));
        } else if (n.op_type == "Gemm") {
            if (n.int_attr("transB", 0) != 1 || n.int_attr("transA", 0) != 0 || n.float_attr("alpha", 1.0F) != 1.0F ||
                n.float_attr("beta", 1.0F) != 1.0F)
                throw DataError("Gemm " + n.name + ": only y = x W^T + b is supported");
            const auto& w = init(n.inputs.at(1));
            const auto& b = init(n.inputs.at(2));
            op.code = OpCode::FullyConnected;
            op.in0 = slot_of(n.inputs[0]);
            op.weight = constant(n.name + "/weight", w.shape(), w.storage());
            op.bias = constant(n.name + "/bias", b.shape(), b.storage());
            std::string v = n.outputs.at(0);
            if (fusable(i + 1, v) && detail::fused_of(nodes[i + 1]) != Fused::None) {
                op.act = detail::fused_of(nodes[++i]);
                v = nodes[i].outputs.at(0);
            }
            op.out = new_slot(v);
        } else if (n.op_type == "Relu" || n.op_type == "HardSwish" || n.op_type == "HardSigmoid") {
            op.code = OpCode::Activation;
            op.act = detail::fused_of(n);
            op.in0 = slot_of(n.inputs.at(0));
            op.out = new_slot(n.outputs.at(0));
        } else if (n.op_type == "Mul" || n.op_type == "Add") {
            const bool mul = n.op_type == "Mul";
            if (is_const(n.inputs.at(1))) {
                const auto& c = init(n.inputs[1]);
                if (c.size() != 1) throw DataError(n.op_type + " " + n.name + ": only scalar constants are supported");
                op.code = mul ? OpCode::MulConst : OpCode::AddConst;
                op.f0 = c[0];
            } else {
                op.code = mul ? OpCode::Mul : OpCode::Add;
                op.in1 = slot_of(n.inputs[1]);
            }
            op.in0 = slot_of(n.inputs.at(0));
            op.out = new_slot(n.outputs.at(0));
        } else if (n.op_type == "Sigmoid") {
            op.code = OpCode::Logistic;
            op.in0 = slot_of(n.inputs.at(0));
            op.out = new_slot(n.outputs.at(0));
        } else if (n.op_type == "Clip") {
            op.code = OpCode::Clamp;
            op.in0 = slot_of(n.inputs.at(0));
            op.f0 = init(n.inputs.at(1))[0];
            op.f1 = init(n.inputs.at(2))[0];
            op.out = new_slot(n.outputs.at(0));
        } else {
            throw DataError("unsupported operator '" + n.op_type + "' in deployment conversion (node " + n.name + ")");
        }
        out.ops.push_back(op);
    }
    out.output_slot = slot_of(src.output);
    return out;
}

// ---------------------------------------------------------------------------
// Binary layout:
//   magic[8] u32 version u32 n_constants u32 n_ops i32 slots i32 input i32 output
//   i32 input_channels i32 input_size u32 metadata_len metadata
//   constants: u32 name_len name u32 rank i64 dims[rank] u64 offset u64 count
//   ops: Op[n_ops]
//   zero padding to 64 bytes, then float32 data

namespace detail {

template <class T>
void put(std::string& s, const T& v)
{
    s.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Cursor {
public:
    explicit Cursor(std::string_view d) : d_(d) {}
    template <class T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, d_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string_view bytes(std::size_t n)
    {
        need(n);
        auto v = d_.substr(pos_, n);
        pos_ += n;
        return v;
    }
    [[nodiscard]] std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const
    {
        if (n > d_.size() - pos_) throw DataError("deployment model is truncated");
    }
    std::string_view d_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string serialize(const Model& m)
{
    std::string head(kMagic, 8);
    detail::put(head, kVersion);
    detail::put(head, static_cast<std::uint32_t>(m.constants.size()));
    detail::put(head, static_cast<std::uint32_t>(m.ops.size()));
    detail::put(head, m.slots);
    detail::put(head, m.input_slot);
    detail::put(head, m.output_slot);
    detail::put(head, m.input_channels);
    detail::put(head, m.input_size);
    detail::put(head, static_cast<std::uint32_t>(m.metadata.size()));
    head += m.metadata;
    std::uint64_t offset = 0;
    for (const auto& c : m.constants) {
        detail::put(head, static_cast<std::uint32_t>(c.name.size()));
        head += c.name;
        detail::put(head, static_cast<std::uint32_t>(c.shape.size()));
        for (auto d : c.shape) detail::put(head, d);
        detail::put(head, offset);
        detail::put(head, static_cast<std::uint64_t>(c.data.size()));
        offset += c.data.size() * sizeof(float);
    }
    for (const auto& op : m.ops) detail::put(head, op);
    head.resize((head.size() + 63) / 64 * 64, '\0');
    head.reserve(head.size() + offset);
    for (const auto& c : m.constants) head.append(reinterpret_cast<const char*>(c.data.data()), c.data.size() * sizeof(float));
    return head;
}

inline Model parse(std::string_view bytes)
{
    detail::Cursor cur(bytes);
    if (cur.bytes(8) != std::string_view(kMagic, 8)) throw DataError("not a deployment model (bad magic)");
    if (const auto v = cur.get<std::uint32_t>(); v != kVersion) throw DataError("unsupported deployment model version " + std::to_string(v));
    Model m;
    const auto nc = cur.get<std::uint32_t>();
    const auto no = cur.get<std::uint32_t>();
    m.slots = cur.get<std::int32_t>();
    m.input_slot = cur.get<std::int32_t>();
    m.output_slot = cur.get<std::int32_t>();
    m.input_channels = cur.get<std::int32_t>();
    m.input_size = cur.get<std::int32_t>();
    m.metadata = std::string(cur.bytes(cur.get<std::uint32_t>()));
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (std::uint32_t i = 0; i < nc; ++i) {
        Constant c;
        c.name = std::string(cur.bytes(cur.get<std::uint32_t>()));
        const auto rank = cur.get<std::uint32_t>();
        for (std::uint32_t r = 0; r < rank; ++r) c.shape.push_back(cur.get<std::int64_t>());
        const auto off = cur.get<std::uint64_t>();
        const auto cnt = cur.get<std::uint64_t>();
        if (static_cast<std::int64_t>(cnt) != shape_numel(c.shape)) throw DataError("deployment constant " + c.name + " has inconsistent size");
        spans.emplace_back(off, cnt);
        m.constants.push_back(std::move(c));
    }
    for (std::uint32_t i = 0; i < no; ++i) m.ops.push_back(cur.get<Op>());
    const std::size_t data_start = (cur.pos() + 63) / 64 * 64;
    for (std::size_t i = 0; i < m.constants.size(); ++i) {
        const auto [off, cnt] = spans[i];
        if (data_start + off + cnt * sizeof(float) > bytes.size()) throw DataError("deployment constant data is truncated");
        m.constants[i].data.resize(cnt);
        std::memcpy(m.constants[i].data.data(), bytes.data() + data_start + off, cnt * sizeof(float));
    }
    for (const auto& op : m.ops) {
        auto bad_slot = [&](std::int32_t s) { return s < -1 || s >= m.slots; };
        auto bad_const = [&](std::int32_t c) { return c < -1 || c >= static_cast<std::int32_t>(m.constants.size()); };
        if (bad_slot(op.in0) || bad_slot(op.in1) || bad_slot(op.out) || op.out < 0 || bad_const(op.weight) || bad_const(op.bias))
            throw DataError(std::string("deployment op ") + opcode_name(op.code) + " references an invalid tensor");
    }
    return m;
}

// ---------------------------------------------------------------------------
// Runtime

/// NHWC activation buffer.
struct Buffer {
    int n = 0, h = 0, w = 0, c = 0;
    std::vector<float> v;
};

class Runtime {
public:
    explicit Runtime(Model m) : m_(std::move(m)) {}

    [[nodiscard]] const Model& model() const noexcept { return m_; }

    /// NCHW input, [N, 1] output.
    Tensor run(const Tensor& x) const
    {
        if (x.rank() != 4 || x.dim(1) != m_.input_channels || x.dim(2) != m_.input_size || x.dim(3) != m_.input_size)
            throw ConfigError("deployment model expects input [N, " + std::to_string(m_.input_channels) + ", " +
                              std::to_string(m_.input_size) + ", " + std::to_string(m_.input_size) + "], got " + shape_str(x.shape()));
        std::vector<Buffer> vals(static_cast<std::size_t>(m_.slots));
        auto& in = vals[m_.input_slot];
        in.n = static_cast<int>(x.dim(0));
        in.c = static_cast<int>(x.dim(1));
        in.h = static_cast<int>(x.dim(2));
        in.w = static_cast<int>(x.dim(3));
        in.v.resize(x.size());
        for (int b = 0; b < in.n; ++b)
            for (int c = 0; c < in.c; ++c)
                for (int p = 0; p < in.h * in.w; ++p)
                    in.v[(static_cast<std::size_t>(b) * in.h * in.w + p) * in.c + c] = x.data()[(static_cast<std::size_t>(b) * in.c + c) * in.h * in.w + p];
        for (const auto& op : m_.ops) vals[op.out] = exec(op, vals);
        const auto& y = vals[m_.output_slot];
        if (static_cast<std::size_t>(y.n) * y.h * y.w * y.c != y.v.size() || y.h * y.w * y.c != 1)
            throw DataError("deployment model output is not one scalar per sample");
        return Tensor({y.n, 1}, y.v);
    }

private:
    static float activate(Fused a, float x)
    {
        switch (a) {
        case Fused::None: return x;
        case Fused::Relu: return x < 0.0F ? 0.0F : x;
        case Fused::HardSwish: return x * std::min(std::max(x + 3.0F, 0.0F), 6.0F) * (1.0F / 6.0F);
        case Fused::HardSigmoid: return std::min(std::max(x * (1.0F / 6.0F) + 0.5F, 0.0F), 1.0F);
        }
        return x;
    }

    Buffer exec(const Op& op, const std::vector<Buffer>& vals) const
    {
        const Buffer& a = vals.at(op.in0);
        Buffer y;
        switch (op.code) {
        case OpCode::Conv2d: return conv(op, a);
        case OpCode::DepthwiseConv2d: return depthwise(op, a);
        case OpCode::Mean: {
            y = {a.n, 1, 1, a.c, std::vector<float>(static_cast<std::size_t>(a.n) * a.c, 0.0F)};
            const int hw = a.h * a.w;
            for (int b = 0; b < a.n; ++b) {
                std::vector<double> acc(a.c, 0.0);
                for (int p = 0; p < hw; ++p)
                    for (int c = 0; c < a.c; ++c) acc[c] += a.v[(static_cast<std::size_t>(b) * hw + p) * a.c + c];
                for (int c = 0; c < a.c; ++c) y.v[static_cast<std::size_t>(b) * a.c + c] = static_cast<float>(acc[c] / hw);
            }
            return y;
        }
        case OpCode::Reshape: return {a.n, 1, 1, a.h * a.w * a.c, a.v};
        case OpCode::Mul:
        case OpCode::Add: {
            const Buffer& b = vals.at(op.in1);
            y = a;
            const bool mul = op.code == OpCode::Mul;
            if (b.v.size() == a.v.size()) {
                for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] = mul ? a.v[i] * b.v[i] : a.v[i] + b.v[i];
            } else if (b.n == a.n && b.c == a.c && b.h * b.w == 1) {
                const std::size_t hw = static_cast<std::size_t>(a.h) * a.w;
                for (int n = 0; n < a.n; ++n)
                    for (std::size_t p = 0; p < hw; ++p)
                        for (int c = 0; c < a.c; ++c) {
                            auto& t = y.v[(n * hw + p) * a.c + c];
                            const float s = b.v[static_cast<std::size_t>(n) * a.c + c];
                            t = mul ? t * s : t + s;
                        }
            } else {
                throw DataError(std::string(opcode_name(op.code)) + ": incompatible operand shapes");
            }
            return y;
        }
        case OpCode::FullyConnected: {
            const auto& w = m_.constants.at(op.weight);
            const auto& bias = m_.constants.at(op.bias);
            const int O = static_cast<int>(w.shape[0]), I = static_cast<int>(w.shape[1]);
            if (a.h * a.w * a.c != I) throw DataError("FULLY_CONNECTED: expected " + std::to_string(I) + " inputs");
            y = {a.n, 1, 1, O, std::vector<float>(static_cast<std::size_t>(a.n) * O)};
            for (int n = 0; n < a.n; ++n) {
                const float* x = a.v.data() + static_cast<std::size_t>(n) * I;
                for (int o = 0; o < O; ++o) {
                    const float* wr = w.data.data() + static_cast<std::size_t>(o) * I;
                    float acc = 0.0F;
                    for (int k = 0; k < I; ++k) acc += wr[k] * x[k];
                    y.v[static_cast<std::size_t>(n) * O + o] = activate(op.act, acc + bias.data[o]);
                }
            }
            return y;
        }
        case OpCode::Logistic:
            y = a;
            for (auto& t : y.v) t = t >= 0.0F ? 1.0F / (1.0F + std::exp(-t)) : std::exp(t) / (1.0F + std::exp(t));
            return y;
        case OpCode::MulConst:
            y = a;
            for (auto& t : y.v) t *= op.f0;
            return y;
        case OpCode::AddConst:
            y = a;
            for (auto& t : y.v) t += op.f0;
            return y;
        case OpCode::Clamp:
            y = a;
            for (auto& t : y.v) t = std::min(std::max(t, op.f0), op.f1);
            return y;
        case OpCode::Activation:
            y = a;
            for (auto& t : y.v) t = activate(op.act, t);
            return y;
        }
        throw DataError("unknown deployment opcode " + std::to_string(static_cast<std::uint32_t>(op.code)));
    }

    Buffer conv(const Op& op, const Buffer& a) const
    {
        const auto& w = m_.constants.at(op.weight);
        const auto& bias = m_.constants.at(op.bias);
        const int O = static_cast<int>(w.shape[0]), K = op.kernel, I = static_cast<int>(w.shape[3]);
        if (I != a.c) throw DataError("CONV_2D: channel mismatch");
        const int oh = (a.h + 2 * op.pad - K) / op.stride + 1, ow = (a.w + 2 * op.pad - K) / op.stride + 1;
        Buffer y{a.n, oh, ow, O, std::vector<float>(static_cast<std::size_t>(a.n) * oh * ow * O)};
        using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        const Eigen::Map<const Mat> W(w.data.data(), O, static_cast<Eigen::Index>(K) * K * I);
        const int P = oh * ow;
        Mat patches;
        for (int n = 0; n < a.n; ++n) {
            const float* src = a.v.data() + static_cast<std::size_t>(n) * a.h * a.w * a.c;
            Eigen::Map<Mat> Y(y.v.data() + static_cast<std::size_t>(n) * P * O, P, O);
            if (K == 1 && op.stride == 1 && op.pad == 0) {
                const Eigen::Map<const Mat> X(src, P, I);
                Y.noalias() = X * W.transpose();
            } else {
                patches.setZero(P, static_cast<Eigen::Index>(K) * K * I);
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox)
                        for (int ky = 0; ky < K; ++ky) {
                            const int iy = oy * op.stride - op.pad + ky;
                            if (iy < 0 || iy >= a.h) continue;
                            for (int kx = 0; kx < K; ++kx) {
                                const int ix = ox * op.stride - op.pad + kx;
                                if (ix < 0 || ix >= a.w) continue;
                                std::memcpy(&patches(oy * ow + ox, (ky * K + kx) * I), src + (static_cast<std::size_t>(iy) * a.w + ix) * I,
                                            sizeof(float) * I);
                            }
                        }
                Y.noalias() = patches * W.transpose();
            }
            for (int p = 0; p < P; ++p)
                for (int o = 0; o < O; ++o) Y(p, o) = activate(op.act, Y(p, o) + bias.data[o]);
        }
        return y;
    }

    Buffer depthwise(const Op& op, const Buffer& a) const
    {
        const auto& w = m_.constants.at(op.weight);
        const auto& bias = m_.constants.at(op.bias);
        const int K = op.kernel, C = a.c;
        if (w.shape[2] != C) throw DataError("DEPTHWISE_CONV_2D: channel mismatch");
        const int oh = (a.h + 2 * op.pad - K) / op.stride + 1, ow = (a.w + 2 * op.pad - K) / op.stride + 1;
        Buffer y{a.n, oh, ow, C, std::vector<float>(static_cast<std::size_t>(a.n) * oh * ow * C)};
        for (int n = 0; n < a.n; ++n) {
            const float* src = a.v.data() + static_cast<std::size_t>(n) * a.h * a.w * C;
            float* dst = y.v.data() + static_cast<std::size_t>(n) * oh * ow * C;
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    float* out = dst + (static_cast<std::size_t>(oy) * ow + ox) * C;
                    std::copy(bias.data.begin(), bias.data.end(), out);
                    for (int ky = 0; ky < K; ++ky) {
                        const int iy = oy * op.stride - op.pad + ky;
                        if (iy < 0 || iy >= a.h) continue;
                        for (int kx = 0; kx < K; ++kx) {
                            const int ix = ox * op.stride - op.pad + kx;
                            if (ix < 0 || ix >= a.w) continue;
                            const float* px = src + (static_cast<std::size_t>(iy) * a.w + ix) * C;
                            const float* wk = w.data.data() + static_cast<std::size_t>(ky * K + kx) * C;
                            for (int c = 0; c < C; ++c) out[c] += px[c] * wk[c];
                        }
                    }
                    for (int c = 0; c < C; ++c) out[c] = activate(op.act, out[c]);
                }
        }
        return y;
    }

    Model m_;
};

} // namespace mobileage::flat
