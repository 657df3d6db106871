"""Few-shot reaction yield regression with a meta-learned head over random-forest tree outputs."""

from metarf.data import (
    ComponentDescriptors,
    DataError,
    DescriptorTable,
    SplitSpec,
    Task,
    encode_reaction,
    load_descriptor_table,
    make_group_split,
    sample_task,
    write_descriptor_table,
)
from metarf.forest import (
    DecisionTree,
    Forest,
    ForestParams,
    fit_forest,
    fit_tree,
    predict_forest_mean,
    predict_tree,
    tree_output_vector,
)
from metarf.head import HeadParams, MetaConfig, finetune, init_params, meta_train, train_transfer
from metarf.sampling import kennard_stone, select_representative
from metarf.tsne import TsneConfig, tsne_embed

__version__ = "0.1.0"

__all__ = [
    "ComponentDescriptors",
    "DataError",
    "DecisionTree",
    "DescriptorTable",
    "Forest",
    "ForestParams",
    "HeadParams",
    "MetaConfig",
    "SplitSpec",
    "Task",
    "TsneConfig",
    "encode_reaction",
    "finetune",
    "fit_forest",
    "fit_tree",
    "init_params",
    "kennard_stone",
    "load_descriptor_table",
    "make_group_split",
    "meta_train",
    "predict_forest_mean",
    "predict_tree",
    "sample_task",
    "select_representative",
    "train_transfer",
    "tree_output_vector",
    "tsne_embed",
    "write_descriptor_table",
]
