#pragma once

#include "revisebench/error.hpp"
#include "revisebench/dates.hpp"
#include "revisebench/numeric.hpp"
#include "revisebench/core_data.hpp"
#include "revisebench/metrics.hpp"
#include "revisebench/prompt_io.hpp"
#include "revisebench/llm_client.hpp"
#include "revisebench/trace_pipeline.hpp"
#include "revisebench/reward_engine.hpp"
#include "revisebench/eval_analytics.hpp"
#include "revisebench/pipeline.hpp"
