use anyhow::{bail, Result};
use wpfs_core::embeddings::{compute_embedding, EmbeddingConfig};
use wpfs_core::harness::{synth_dataset, Dataset, SynthSpec};
use wpfs_core::wpfs::persist::{load_model, method_of};
use wpfs_core::wpfs::{feature_importance, Model};
use wpfs_core::Rng;

use crate::args::{EmbedArgs, ImportanceArgs, SynthArgs};
use crate::output::OutDir;
use crate::resolve_seed;

pub fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let dataset = Dataset::load_csv(&args.data, &args.label_col)?;
    let config = EmbeddingConfig {
        method: args.method,
        size: args.k,
        preprocessing: args.preprocessing,
        bins: args.bins,
        nmf_iterations: args.iterations,
    };
    let mut rng = Rng::new(resolve_seed(args.seed)?);
    let embedding = compute_embedding(&dataset.x, &config, &mut rng)?;
    let out = OutDir::create(&args.out)?;
    out.write_with("embedding.csv", |w| {
        Ok(embedding.write_csv(w, &dataset.feature_names)?)
    })?;
    println!(
        "{} embedding: {} features × {}",
        args.method,
        embedding.features(),
        embedding.size()
    );
    Ok(())
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    if args.preset != "default" {
        bail!("unknown preset '{}'; valid presets: default", args.preset);
    }
    let d = SynthSpec::DEFAULT;
    let spec = SynthSpec {
        samples: args.samples.unwrap_or(d.samples),
        features: args.features.unwrap_or(d.features),
        informative: args.informative.unwrap_or(d.informative),
        classes: args.classes.unwrap_or(d.classes),
        noise: args.noise.unwrap_or(d.noise),
    };
    let dataset = synth_dataset(spec, resolve_seed(args.seed)?)?;
    let out = OutDir::create(&args.out)?;
    out.write_with("data.csv", |w| Ok(dataset.write_csv(w, &args.label_col)?))?;
    out.write_with("informative.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["feature_index", "feature_name"])?;
        for &j in dataset.informative.as_deref().unwrap_or_default() {
            w.write_record([j.to_string(), dataset.feature_names[j].clone()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    println!(
        "synthetic data: {} samples × {} features, {} informative, {} classes",
        spec.samples, spec.features, spec.informative, spec.classes
    );
    Ok(())
}

pub fn cmd_importance(args: ImportanceArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        bail!("--threshold must lie in [0, 1], got {}", args.threshold);
    }
    let (model, header) = load_model(&args.model)?;
    let wpfs = match &model {
        Model::Wpfs(m) if m.net.use_spn => m,
        _ => bail!(
            "{}: method {} has no sparsity network, so no importance scores",
            args.model.display(),
            method_of(&model)
        ),
    };
    let importance = feature_importance(wpfs, args.threshold)?;
    let out = OutDir::create(&args.out)?;
    out.write_with("importance.csv", |w| {
        Ok(importance.write_csv(w, &header.feature_names)?)
    })?;
    println!(
        "{} of {} features score above {}",
        importance.selected.len(),
        importance.scores.len(),
        args.threshold
    );
    Ok(())
}
