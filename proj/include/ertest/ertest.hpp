#pragma once

#include "ertest/errors.hpp"
#include "ertest/autodiff.hpp"
#include "ertest/dataset.hpp"
#include "ertest/model.hpp"
#include "ertest/extractors.hpp"
#include "ertest/criteria.hpp"
#include "ertest/rationales.hpp"
#include "ertest/selection.hpp"
#include "ertest/training.hpp"
#include "ertest/evaluation.hpp"
#include "ertest/datagen.hpp"
#include "ertest/config.hpp"
#include "ertest/report.hpp"
#include "ertest/runner.hpp"
