"""Rule-learning dosing models with an expert in the loop.

Longitudinal visits cluster by patient; mixed-effects model trees learn
IF-THEN dose-response rules; experts annotate, edit, and gate their way
into the training data; every model version is reproducible from its
snapshot.
"""

from .agreement import (
    AgreementResult,
    RatingsMatrix,
    agreement_result,
    bootstrap_ci,
    intra_rater_alpha,
    krippendorff_alpha,
    load_ratings_csv,
    reliability_gate,
)
from .dataset import (
    Dataset,
    DatasetError,
    DuplicateVisitError,
    LagDerivation,
    LagSpec,
    MalformedValueError,
    MissingColumnError,
    VisitRecord,
    concat,
    derive_lags,
    load_csv,
    temporal_split,
    write_csv,
)
from .glmmtree import (
    BaggedGlmmTreeRegressor,
    DoseResponsePoint,
    GlmmTreeRegressor,
    dose_response,
    fit_bagged_glmm_tree,
    fit_glmm_tree,
    predict_glmm_tree,
)
from .lmm import (
    LmmFit,
    LmmRankError,
    fit_lmm,
    forward_select,
    predict_lmm,
    profiled_loglik,
)
from .loop import (
    AdvicePool,
    AdviceRecord,
    EvalMetrics,
    LoopConfig,
    LoopState,
    MergePolicy,
    OracleExpert,
    RulePredictor,
    evaluate,
    init_state,
    iterate,
    load_snapshot,
    mae,
    merge_advice,
    misspecified_scenario,
    oracle_expert,
    replay,
    rmse,
    run_loop,
    save_snapshot,
)
from .persist import load_model, save_model
from .rules import (
    AddCondition,
    Condition,
    ModifyThreshold,
    RemoveCondition,
    Rule,
    RuleEdit,
    RuleError,
    RuleSet,
    SetModel,
    UnknownRuleError,
    UnsatisfiableRuleError,
    apply_edit,
    encode,
    extract_rules,
    rule_to_text,
    sample_from_rule,
    satisfiable,
    validate,
)
from .synthetic import (
    SyntheticTruth,
    generate_synthetic,
    graded_truth,
    misspecified_pair,
    three_leaf_truth,
    truth_value,
    two_leaf_truth,
)
from .tree import (
    CartRegressor,
    Forest,
    ForestRegressor,
    NodeModel,
    TreeNode,
    apply_tree,
    fit_cart,
    fit_forest,
    grow_tree,
    predict_forest,
    predict_tree,
)

__version__ = "0.1.0"
