"""Collective matrix factorization and the offsets model for cold-start recommendation."""
from .cmf import (CmfHyperparams, CmfModel, FactorPartition, als_fit, cmf_objective, cmf_predict,
                  cold_start_factors_sigmoid, cold_start_item_factors, cold_start_user_factors,
                  lbfgs_fit, sigmoid_transform)
from .data import RatingsMatrix, SideInfoMatrix
from .evaluation import (EvalReport, dcg_at_k, mean_user_ndcg, most_popular_baseline, ndcg_at_k,
                         random_baseline, rmse, run_scenarios)
from .offsets import (OffsetsModel, offsets_fit, offsets_objective, offsets_predict,
                      offsets_predict_new_user, offsets_two_stage_fit, offsets_user_vector)
from .optimizer import (ObjectiveEvaluation, SolverConfig, Termination, finite_difference_gradient,
                        lbfgs_minimize)
from .pipeline import (FourWaySplit, SplitSpec, binarize_categoricals, compute_global_mean,
                       four_way_split, load_ratings, pca_reduce)

__version__ = "0.1.0"
