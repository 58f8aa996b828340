#pragma once

#include <cstddef>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hetspec/error.hpp"

namespace hetspec {

inline constexpr std::size_t kNoParent = std::numeric_limits<std::size_t>::max();

struct TreeNode {
  std::size_t parent = kNoParent;
  std::size_t head = 0;  // draft head index == depth; 0 for the root
  std::size_t rank = 0;  // candidate rank within that head

  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

// Rooted tree of (head, rank) draft candidates. Node 0 is the root, i.e. the
// last accepted token; every other node extends its parent by one draft head.
class VerificationTree {
 public:
  VerificationTree() : nodes_{TreeNode{}} {}

  // `nodes` excludes the root; parent indices count the root as 0.
  static VerificationTree from_nodes(const std::vector<TreeNode>& nodes) {
    VerificationTree t;
    for (const auto& n : nodes) {
      if (n.parent >= t.width()) {
        throw ConfigError("tree: parent index " + std::to_string(n.parent) + " must precede node " +
                          std::to_string(t.width()));
      }
      if (n.head != t.nodes_[n.parent].head + 1) {
        throw ConfigError("tree: node " + std::to_string(t.width()) + " has head " + std::to_string(n.head) +
                          " but its parent is at depth " + std::to_string(t.nodes_[n.parent].head));
      }
      t.add(n.parent, n.rank);
    }
    return t;
  }

  static VerificationTree root_only() { return {}; }

  // Root followed by `depth` rank-0 candidates, one per head.
  static VerificationTree chain(std::size_t depth) {
    VerificationTree t;
    for (std::size_t d = 0; d < depth; ++d) t.add(d, 0);
    return t;
  }

  std::size_t add(std::size_t parent, std::size_t rank) {
    if (parent >= nodes_.size()) throw ConfigError("tree: parent out of range");
    if (!used_.insert({parent, rank}).second) {
      throw ConfigError("tree: duplicate (parent " + std::to_string(parent) + ", rank " + std::to_string(rank) + ")");
    }
    nodes_.push_back({parent, nodes_[parent].head + 1, rank});
    children_.resize(nodes_.size());
    children_[parent].push_back(nodes_.size() - 1);
    return nodes_.size() - 1;
  }

  std::size_t width() const noexcept { return nodes_.size(); }
  const TreeNode& node(std::size_t i) const { return nodes_.at(i); }
  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  std::size_t depth(std::size_t i) const { return nodes_.at(i).head; }

  std::size_t max_depth() const {
    std::size_t d = 0;
    for (const auto& n : nodes_) d = std::max(d, n.head);
    return d;
  }

  std::size_t max_rank() const {
    std::size_t r = 0;
    for (std::size_t i = 1; i < nodes_.size(); ++i) r = std::max(r, nodes_[i].rank);
    return r;
  }

  const std::vector<std::size_t>& children(std::size_t i) const {
    static const std::vector<std::size_t> none;
    return i < children_.size() ? children_[i] : none;
  }

  bool is_leaf(std::size_t i) const { return children(i).empty(); }

  bool has_child(std::size_t parent, std::size_t rank) const { return used_.count({parent, rank}) != 0; }

  // Root-to-node index path, root first and `i` last.
  std::vector<std::size_t> path(std::size_t i) const {
    std::vector<std::size_t> p;
    for (std::size_t n = i; n != kNoParent; n = nodes_[n].parent) p.push_back(n);
    return {p.rbegin(), p.rend()};
  }

  bool is_ancestor_or_self(std::size_t anc, std::size_t i) const {
    for (std::size_t n = i; n != kNoParent; n = nodes_[n].parent) {
      if (n == anc) return true;
    }
    return false;
  }

  // Non-root nodes in index order, the serialized form.
  std::vector<TreeNode> non_root_nodes() const { return {nodes_.begin() + 1, nodes_.end()}; }

  friend bool operator==(const VerificationTree& a, const VerificationTree& b) { return a.nodes_ == b.nodes_; }

 private:
  std::vector<TreeNode> nodes_;
  std::vector<std::vector<std::size_t>> children_ = std::vector<std::vector<std::size_t>>(1);
  std::set<std::pair<std::size_t, std::size_t>> used_;
};

}  // namespace hetspec
