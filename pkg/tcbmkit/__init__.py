from .dispatcher import Dispatcher
from .context import Context, pass_context, get_current_context
from .exceptions import TaskError, ValidationError, ExternalError, DatasetError, ConceptError, TrainingError, TransportError
from .groups import RootCommand, root, task
from .utils import load_config_file, merge_overrides, normalize_config, set_up_progress_listeners
from .data_model import ClassifierHead, ConceptMatrix, EmbeddingDataset, load_concept_matrix, load_dataset, load_head, split_view, validate_concept_matrix
from .annotation_client import EndpointConfig, MicroAnnotation, annotate_micro_concepts, label_macro_concept, parse_label, parse_topics
from .concept_bank import BankConfig, ConceptBank, MacroConcept, build_macro_bank, cluster_micro_concepts, cooccurrence_clusters, init_cbl, next_concepts
from .concept_geometry import CAV, compute_cav, fit_cavs, identifiability, predict_concept_linear, project
from .concept_importance import ConceptScore, ImportanceConfig, cig_importance, head_gradient, integrated_gradients, score_concepts, tcav_importance
from .tcbm import TCBMModel, TrainConfig, forward, intervene, predict, tcbm_loss, train
from .pipeline import PipelineConfig, PipelineResult, residual_importance, run_pipeline, should_stop_performance, should_stop_residual_ma
from .eval_explain import EvalConfig, EvalReport, diversity, evaluate, export_global_explanation, intervention_curve
from . import libs

__all__ = [
    # from dispatcher module
    'Dispatcher',

    # from context module
    'Context',
    'pass_context',
    'get_current_context',

    # from exceptions module
    'TaskError',
    'ValidationError',
    'ExternalError',
    'DatasetError',
    'ConceptError',
    'TrainingError',
    'TransportError',

    # from groups module
    'RootCommand',
    'root',
    'task',

    # from utils module
    'load_config_file',
    'merge_overrides',
    'normalize_config',
    'set_up_progress_listeners',

    # from data_model module
    'ClassifierHead',
    'ConceptMatrix',
    'EmbeddingDataset',
    'load_concept_matrix',
    'load_dataset',
    'load_head',
    'split_view',
    'validate_concept_matrix',

    # from annotation_client module
    'EndpointConfig',
    'MicroAnnotation',
    'annotate_micro_concepts',
    'label_macro_concept',
    'parse_label',
    'parse_topics',

    # from concept_bank module
    'BankConfig',
    'ConceptBank',
    'MacroConcept',
    'build_macro_bank',
    'cluster_micro_concepts',
    'cooccurrence_clusters',
    'init_cbl',
    'next_concepts',

    # from concept_geometry module
    'CAV',
    'compute_cav',
    'fit_cavs',
    'identifiability',
    'predict_concept_linear',
    'project',

    # from concept_importance module
    'ConceptScore',
    'ImportanceConfig',
    'cig_importance',
    'head_gradient',
    'integrated_gradients',
    'score_concepts',
    'tcav_importance',

    # from tcbm module
    'TCBMModel',
    'TrainConfig',
    'forward',
    'intervene',
    'predict',
    'tcbm_loss',
    'train',

    # from pipeline module
    'PipelineConfig',
    'PipelineResult',
    'residual_importance',
    'run_pipeline',
    'should_stop_performance',
    'should_stop_residual_ma',

    # from eval_explain module
    'EvalConfig',
    'EvalReport',
    'diversity',
    'evaluate',
    'export_global_explanation',
    'intervention_curve',

    # other modules
    'libs',
]
