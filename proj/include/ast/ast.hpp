#pragma once

// Umbrella header.
#include "ast/autodiff.hpp"
#include "ast/checkpoint.hpp"
#include "ast/errors.hpp"
#include "ast/export.hpp"
#include "ast/flow_teacher.hpp"
#include "ast/gradcheck.hpp"
#include "ast/io.hpp"
#include "ast/metrics.hpp"
#include "ast/nn.hpp"
#include "ast/ops.hpp"
#include "ast/optim.hpp"
#include "ast/preprocess.hpp"
#include "ast/sample.hpp"
#include "ast/student.hpp"
#include "ast/synth.hpp"
#include "ast/tensor.hpp"
#include "ast/toy.hpp"
#include "ast/verify.hpp"
#include "ast/training.hpp"
