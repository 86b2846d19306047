#![allow(dead_code)]

use cmaclip::data::{class_color, keyword, split, synth_generate, DatasetSplit, Region, SynthConfig};
use cmaclip::encoders::{words, RawImage};

/// Class named by the task's keyword in the text, if any.
pub fn keyword_lookup(text: &str, task: usize, n_classes: usize) -> Option<usize> {
    let ws = words(text);
    (0..n_classes).find(|&c| ws.contains(&keyword(task, c)))
}

fn region_mean(img: &RawImage, r: Region) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for y in r.y0..r.y0 + r.height {
        for x in r.x0..r.x0 + r.width {
            let p = img.pixel(y, x);
            for ch in 0..3 {
                acc[ch] += p[ch];
            }
        }
    }
    acc.map(|v| v / (r.height * r.width) as f64)
}

/// Nearest class colour to the region's mean colour.
pub fn region_classify(img: &RawImage, r: Region, n_classes: usize) -> usize {
    let m = region_mean(img, r);
    let dist = |c: usize| {
        let col = class_color(c, n_classes);
        (0..3).map(|i| (m[i] - col[i]).powi(2)).sum::<f64>()
    };
    (0..n_classes)
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        .unwrap()
}

/// Every pixel of the region lies within the colour jitter of `class`.
pub fn region_painted(img: &RawImage, r: Region, class: usize, n_classes: usize) -> bool {
    let col = class_color(class, n_classes);
    (r.y0..r.y0 + r.height).all(|y| {
        (r.x0..r.x0 + r.width).all(|x| {
            img.pixel(y, x)
                .iter()
                .zip(col)
                .all(|(a, b)| (a - b).abs() <= 12.5 / 255.0)
        })
    })
}

/// 3000 pairs from the three-attribute preset, split 2000/500/500.
pub fn mrwpa_split() -> (SynthConfig, DatasetSplit) {
    let cfg = SynthConfig::preset("mrwpa-like", 3000, 7).unwrap();
    let pairs = synth_generate(&cfg).unwrap();
    let s = split(&pairs, [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 7).unwrap();
    (cfg, s)
}
