use std::path::Path;

use sona_core::data::{Archive, BenchmarkSplits, LabeledImage};
use sona_core::detector::{
    energy_scores, train_detector, DetectorConfig, DetectorModel, DetectorTrainConfig, LossTier,
};
use sona_core::eval::auroc;
use sona_core::guidance::OutlierSet;
use sona_core::{stack, Result, SeededRng, Tensor};

fn batch(images: &[LabeledImage]) -> Tensor {
    let rows: Vec<&Tensor> = images.iter().map(|i| &i.pixels).collect();
    stack(&rows)
}

fn report(model: &DetectorModel, splits: &BenchmarkSplits) -> Result<(f64, f64, f64)> {
    let id_test = batch(&splits.id_test);
    let labels: Vec<usize> = splits
        .id_test
        .iter()
        .map(|i| splits.id_class_index(i.label).unwrap())
        .collect();
    let acc = model.accuracy(&id_test, &labels)?;
    let e_id = energy_scores(model, &id_test)?;
    let e_near = energy_scores(model, &batch(&splits.near_ood_test))?;
    let e_far = energy_scores(model, &batch(&splits.far_ood_test))?;
    Ok((acc, auroc(&e_id, &e_near)?, auroc(&e_id, &e_far)?))
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    // usage: probe <workdir> <gamma> <q_lr> [epochs] [warmup_epochs] [seed] [outlier_tag]
    let dir = &args[1];
    let gamma: f64 = args[2].parse().unwrap();
    let q_lr: f32 = args[3].parse().unwrap();
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(8);
    let warmup: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0);
    let tag: String = args
        .get(7)
        .cloned()
        .unwrap_or_else(|| "outliers_sona.sona".into());

    let a = Archive::load(Path::new(&format!("{dir}/data.sona")))?;
    let splits = BenchmarkSplits::from_archive(&a)?;
    let a = Archive::load(Path::new(&format!("{dir}/{tag}")))?;
    let outliers = OutlierSet::from_archive(&a)?;

    let mut images: Vec<Tensor> = Vec::new();
    let mut labels = Vec::new();
    for img in &splits.id_train {
        images.push(img.pixels.clone());
        labels.push(splits.id_class_index(img.label)?);
    }

    let base = DetectorTrainConfig {
        q_lr,
        gamma_mi: gamma,
        seed,
        ..DetectorTrainConfig::default()
    }
    .tiered(LossTier::Full);

    let mut rng = SeededRng::new(seed ^ 0x1217_AB1E);
    let mut model =
        DetectorModel::init(DetectorConfig::new(splits.num_id_classes()), &mut rng)?;

    let run = |model: &mut DetectorModel, cfg: &DetectorTrainConfig| -> Result<()> {
        let stats = train_detector(model, &images, &labels, Some(&outliers), cfg)?;
        for e in 0..stats.epoch_ce.len() {
            println!(
                "  ce {:<8.4} oe {:<8.4} club {:<9.3} q_nll {:<9.3}",
                stats.epoch_ce[e], stats.epoch_oe[e], stats.epoch_club[e], stats.epoch_q_nll[e]
            );
        }
        Ok(())
    };

    if warmup > 0 && gamma > 0.0 {
        let pre = DetectorTrainConfig {
            gamma_mi: 0.0,
            epochs: warmup,
            ..base.clone()
        };
        run(&mut model, &pre)?;
        let post = DetectorTrainConfig {
            epochs: epochs - warmup,
            seed: seed ^ 0xACED,
            ..base.clone()
        };
        run(&mut model, &post)?;
    } else {
        let cfg = DetectorTrainConfig {
            epochs,
            ..base.clone()
        };
        run(&mut model, &cfg)?;
    }

    let (acc, near, far) = report(&model, &splits)?;
    println!(
        "gamma {gamma} q_lr {q_lr} warmup {warmup} seed {seed}: id_acc {acc:.4} near {near:.4} far {far:.4}"
    );
    Ok(())
}
