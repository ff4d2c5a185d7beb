#pragma once

#include "graded/tensor.hpp"
#include "graded/tape.hpp"
#include "graded/gradcheck.hpp"
#include "graded/random.hpp"
#include "graded/linalg.hpp"
#include "graded/grading.hpp"
#include "graded/lgt.hpp"
#include "graded/normalize.hpp"
#include "graded/least_squares.hpp"
#include "graded/routing.hpp"
#include "graded/model.hpp"
#include "graded/objective.hpp"
#include "graded/optimizer.hpp"
#include "graded/tasks.hpp"
#include "graded/geometry.hpp"
#include "graded/category.hpp"
#include "graded/checkpoint.hpp"
#include "graded/experiment.hpp"
#include "graded/diagnostics.hpp"
#include "graded/verify.hpp"
