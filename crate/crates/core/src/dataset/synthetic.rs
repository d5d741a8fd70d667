//! Seeded synthetic citation datasets for tests, demos and protocol checks.
//!
//! The class mix is deliberately skewed towards `Background`, but the
//! proportions are invented and carry no claim about any real corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CitationInstance, IntentLabel, LabelSource, LabeledExample};

/// Default class weights in canonical label order.
pub const DEFAULT_CLASS_WEIGHTS: [f64; 5] = [0.60, 0.13, 0.10, 0.05, 0.12];

const TEMPLATES: [&[&str]; 5] = [
    &[
        "Derin öğrenme yöntemleri son yıllarda pek çok alanda yaygınlaşmıştır",
        "Bu konu literatürde geniş biçimde ele alınmıştır",
        "Nesnelerin interneti kavramı ilk kez bu çalışmada tanımlanmıştır",
    ],
    &[
        "Bu çalışmada önerilen yöntem temel alınarak model geliştirilmiştir",
        "Veri ön işleme adımları bu çalışmadaki yaklaşım izlenerek uygulanmıştır",
        "Kullanılan mimari bu çalışmada sunulan yapıya dayanmaktadır",
    ],
    &[
        "Elde edilen sonuçlar önceki çalışmanın bulgularını desteklemektedir",
        "Bulgularımız bu çalışmada raporlanan doğruluk değerleriyle uyumludur",
        "Benzer şekilde bu çalışmada da performans artışı gözlenmiştir",
    ],
    &[
        "Elde edilen sonuçlar bu çalışmanın bulgularından farklılık göstermektedir",
        "Önceki çalışmanın aksine modelimiz daha düşük hata oranı vermiştir",
        "Bu sonuç literatürde bildirilen değerlerle çelişmektedir",
    ],
    &[
        "Bu çalışmanın güçlü ve zayıf yönleri ayrıntılı olarak tartışılmıştır",
        "Yöntemin sınırlılıkları bu çalışma bağlamında değerlendirilmiştir",
        "Söz konusu yaklaşım ile önerilen yöntem karşılaştırmalı olarak incelenmiştir",
    ],
];

fn pick_label(rng: &mut ChaCha8Rng, weights: &[f64; 5]) -> IntentLabel {
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return IntentLabel::ALL[i];
        }
        draw -= w;
    }
    IntentLabel::Discuss
}

/// `n` labeled examples with ids `S00000`, `S00001`, ...; every sentence is unique
/// because it embeds its own id as the reference marker.
pub fn synthetic_dataset(n: usize, seed: u64) -> Vec<LabeledExample> {
    synthetic_dataset_with_weights(n, seed, &DEFAULT_CLASS_WEIGHTS)
}

pub fn synthetic_dataset_with_weights(n: usize, seed: u64, weights: &[f64; 5]) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = pick_label(&mut rng, weights);
            let templates = TEMPLATES[label.index()];
            let body = templates[rng.random_range(0..templates.len())];
            let id = format!("S{i:05}");
            let mut instance = CitationInstance::new(
                id.clone(),
                format!("{body} [{id}]."),
                format!("A{:03}", i / 4),
            );
            instance.journal = Some("Synthetic Journal of Computing".to_string());
            instance.year = Some(2015 + (i % 9) as i32);
            LabeledExample {
                instance,
                label,
                label_source: LabelSource::Human,
            }
        })
        .collect()
}
