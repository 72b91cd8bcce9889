#pragma once

#include <cstddef>
#include <string_view>

namespace edit {

enum class ActionKind { Skip, Reuse, Compute };

// One block decision during denoising. width is meaningful for Compute only.
struct BlockAction {
  ActionKind kind = ActionKind::Compute;
  double width = 1.0;

  static BlockAction skip() { return {ActionKind::Skip, 1.0}; }
  static BlockAction reuse() { return {ActionKind::Reuse, 1.0}; }
  static BlockAction compute(double width) { return {ActionKind::Compute, width}; }

  friend bool operator==(const BlockAction& a, const BlockAction& b) {
    return a.kind == b.kind && (a.kind != ActionKind::Compute || a.width == b.width);
  }
};

inline std::string_view action_name(ActionKind k) {
  switch (k) {
    case ActionKind::Skip: return "skip";
    case ActionKind::Reuse: return "reuse";
    case ActionKind::Compute: return "compute";
  }
  return "?";
}

struct TraceRecord {
  int step = 0;  // denoising step index, 0 at t = 1
  std::size_t block = 0;
  double p = 0.0;
  BlockAction action;
  double flops = 0.0;
};

}  // namespace edit
