//! Stage helpers shared by the command-line tool and the synthetic harness.

use crate::binarize::{binarize_layer, ActivationPattern};
use crate::clustering::FrameClusterLabels;
use crate::error::Result;
use crate::neuron_id::{
    build_protected_set, count_cooccurrence, identify_ivector_neurons, identify_ssl_neurons, IdentifyOptions, IveMode,
    IveNeurons, NeuronSet, Provenance, SslNeurons,
};
use crate::tensor_io::ActivationStore;

/// Binarizes every layer of a store.
pub fn binarize_store(store: &ActivationStore, lambda_pct: f64) -> Result<Vec<ActivationPattern>> {
    store.layers().iter().map(|l| binarize_layer(l, lambda_pct)).collect()
}

/// Everything the identification stage produces.
#[derive(Debug, Clone)]
pub struct Identification {
    pub ssl: SslNeurons,
    pub ive: IveNeurons,
    pub p_ssl: NeuronSet,
    pub p_ive: NeuronSet,
    pub protected: NeuronSet,
}

pub fn identify(
    patterns: &[ActivationPattern],
    labels: &FrameClusterLabels,
    mode: IveMode,
    opts: &IdentifyOptions,
    provenance: &Provenance,
) -> Result<Identification> {
    let table = count_cooccurrence(patterns, labels)?;
    let ssl = identify_ssl_neurons(&table, opts)?;
    let ive = identify_ivector_neurons(&table, mode, opts)?;
    let p_ssl = ssl.exclusive_set(provenance);
    let p_ive = ive.exclusive_set(provenance);
    let protected = build_protected_set(&p_ssl, &p_ive)?;
    Ok(Identification {
        ssl,
        ive,
        p_ssl,
        p_ive,
        protected,
    })
}
