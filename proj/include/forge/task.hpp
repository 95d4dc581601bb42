#pragma once

#include <string>
#include <vector>

#include "common.hpp"

namespace forge {

enum class TaskTemplate : int {
  put_in = 0,          // put A in container B
  stack_on = 1,        // stack A on B
  move_left_of = 2,    // move A left of B
  two_object_put_in = 3  // put A and B in container C
};

inline const char* template_name(TaskTemplate t) {
  switch (t) {
    case TaskTemplate::put_in: return "put-in";
    case TaskTemplate::stack_on: return "stack-on";
    case TaskTemplate::move_left_of: return "move-left-of";
    case TaskTemplate::two_object_put_in: return "two-object-put-in";
  }
  return "?";
}

/// Instruction template plus the object ids it binds.
struct TaskSpec {
  TaskTemplate tmpl = TaskTemplate::put_in;
  std::vector<int> subjects;  // objects to manipulate, in order
  int target = -1;            // container / reference object
  int horizon = 64;           // token budget L
};

}  // namespace forge
