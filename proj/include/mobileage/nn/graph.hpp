#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mobileage/tensor.hpp"
#include "mobileage/tensor_io.hpp"

namespace mobileage {

/// One operator of the portable inference graph. `inputs` name activation
/// values; `weights` maps a role ("weight", "bias", "mean", ...) to an
/// initializer name.
struct GraphNode {
    std::string op;
    std::vector<std::string> inputs;
    std::string output;
    std::map<std::string, std::string> weights;
    nlohmann::json attrs = nlohmann::json::object();
};

inline void to_json(nlohmann::json& j, const GraphNode& n)
{
    j = {{"op", n.op}, {"inputs", n.inputs}, {"output", n.output}, {"weights", n.weights}, {"attrs", n.attrs}};
}
inline void from_json(const nlohmann::json& j, GraphNode& n)
{
    n.op = j.at("op").get<std::string>();
    n.inputs = j.at("inputs").get<std::vector<std::string>>();
    n.output = j.at("output").get<std::string>();
    n.weights = j.at("weights").get<std::map<std::string, std::string>>();
    n.attrs = j.at("attrs");
}

/// Inference graph: NCHW float32, batch dimension dynamic.
struct Graph {
    std::string input = "input";
    std::string output;
    Shape input_shape{-1, 3, 224, 224};
    std::vector<GraphNode> nodes;
    TensorMap initializers;
};

/// Appends nodes with generated value names.
class GraphBuilder {
public:
    explicit GraphBuilder(Graph& g) : g_(g) {}

    std::string add(std::string op, std::vector<std::string> inputs, std::map<std::string, std::string> weights = {},
                    nlohmann::json attrs = nlohmann::json::object())
    {
        GraphNode n{std::move(op), std::move(inputs), "v" + std::to_string(g_.nodes.size()), std::move(weights), std::move(attrs)};
        g_.nodes.push_back(n);
        return g_.nodes.back().output;
    }

    void initializer(const std::string& name, const Tensor& t) { g_.initializers[name] = t; }

private:
    Graph& g_;
};

} // namespace mobileage
