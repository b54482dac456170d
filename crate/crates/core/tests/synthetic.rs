use aualign::dataio::synth::{synth_dataset, write_synth, SynthConfig};
use aualign::dataio::{load_manifest, Dataset, LoadOptions};
use aualign::metrics::{f1_frame, LabelMatrix};

/// Per-AU logistic regression on raw pixels, trained by full-batch gradient descent.
fn probe(train: &Dataset, test: &Dataset) -> Vec<Vec<f64>> {
    let feats =
        |d: &Dataset| -> Vec<Vec<f64>> { d.images.iter().map(|t| t.data().to_vec()).collect() };
    let (xtr, xte) = (feats(train), feats(test));
    let dim = xtr[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| xtr.iter().map(|x| x[j]).sum::<f64>() / xtr.len() as f64)
        .collect();
    let center = |x: &[f64]| {
        x.iter()
            .zip(&mean)
            .map(|(a, m)| a - m)
            .collect::<Vec<f64>>()
    };
    let (xtr, xte): (Vec<_>, Vec<_>) = (
        xtr.iter().map(|x| center(x)).collect(),
        xte.iter().map(|x| center(x)).collect(),
    );
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let n_au = train.n_au();
    let mut preds = vec![vec![0.0; n_au]; xte.len()];
    for a in 0..n_au {
        let (mut w, mut b) = (vec![0.0; dim], 0.0);
        for _ in 0..400 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, y) in xtr.iter().zip(&train.labels) {
                let z: f64 = x.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>() + b;
                let e = sig(z) - y[a];
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += e * v;
                }
                gb += e;
            }
            let k = 0.05 / xtr.len() as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= k * g + 1e-4 * *wi;
            }
            b -= k * gb;
        }
        for (p, x) in preds.iter_mut().zip(&xte) {
            p[a] = sig(x.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>() + b);
        }
    }
    preds
}

#[test]
fn labels_are_learnable_from_pixels() {
    let data = synth_dataset(&SynthConfig::default()).unwrap().dataset;
    let held_out = ["s06", "s07"];
    let (test_idx, train_idx): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| held_out.contains(&data.subjects[i].as_str()));
    assert_eq!(test_idx.len(), 16);
    let (train, test) = (data.subset(&train_idx), data.subset(&test_idx));
    let preds = probe(&train, &test);
    let truth = LabelMatrix::from_rows(&test.labels).unwrap();
    let probe_f1 = f1_frame(&truth, &LabelMatrix::from_rows(&preds).unwrap())
        .unwrap()
        .average;
    // Chance: always predicting occurrence.
    let always = vec![vec![1.0; test.n_au()]; test.len()];
    let chance = f1_frame(&truth, &LabelMatrix::from_rows(&always).unwrap())
        .unwrap()
        .average;
    assert!(
        probe_f1 > chance,
        "probe F1 {probe_f1:.3} vs always-on {chance:.3}"
    );
}

#[test]
fn written_dataset_reloads_with_matching_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        subjects: 3,
        frames: 5,
        seed: 9,
        ..SynthConfig::default()
    };
    let synth = synth_dataset(&cfg).unwrap();
    let path = write_synth(dir.path(), &synth).unwrap();
    let loaded = load_manifest(
        &path,
        &LoadOptions {
            fail_fast: true,
            check_images: true,
            ..Default::default()
        },
    )
    .unwrap();
    let data = Dataset::from_manifest(&loaded.manifest, 1.0).unwrap();
    assert_eq!(data, synth.dataset);
    let rates = data.rates();
    for (a, b) in rates.iter().zip(&synth.rates) {
        assert!((a - b).abs() < 1e-12);
    }
    let rates_file = std::fs::read_to_string(dir.path().join("rates.txt")).unwrap();
    assert_eq!(
        rates_file
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .count(),
        rates.len()
    );
}
