import sys
import os

# Add local path to sys.path
sys.path.append(os.getcwd())
os.environ.setdefault("CROWD_GAUGE_LOG", "")

try:
    from models.mechanism import CoinPair, RandomizedResponseSpec, LaplaceSpec
    from models.protocol import Query, SignedQuery, Response, EpochAggregate
    from models.scenario import ScenarioConfig, Poi
    from utils.random_source import RandomSource
    from utils.signing import Keyring, sign_query
    from mechanisms import rr_randomize, rr_privacy_level, laplace_sample
    from estimation import estimate_true_yes, relative_error_mc
    from cost_model import private_cost, breakeven_epsilon, cost_curve
    from aggregator import Aggregator
    from owners import HttpBinding, InProcessBinding, run_respondents
    from service import create_app, build_aggregator
    from simulator import run_simulation, default_campus_scenario
    from reports import safe_replace
    from main import main
    print("Imports successful. Syntax looks OK.")
except Exception as e:
    print(f"Syntax/Import Error: {e}")
    sys.exit(1)
