//! Generates the paired corpus and corrupts one utterance with each noise
//! type at several SNRs, printing the measured SNR.
//!
//! cargo run --example noisy_corpus

use rgf::data::{gen_corpus, measured_snr_db, mix_noise, CorpusConfig, NoiseType};

fn main() -> rgf::Result<()> {
    let cfg = CorpusConfig { n_train: 32, n_test: 8, viseme_groups: Some(6), ..CorpusConfig::default() };
    let (train, test) = gen_corpus(&cfg)?;
    println!("{} train / {} test utterances", train.len(), test.len());
    let s = &test.samples[0];
    println!("first test utterance: tokens {:?}, {} frames", s.tokens, s.frames());

    let babble = test.babble_sources(0, &mut rgf::seed::rng(1));
    for kind in NoiseType::CORRUPTING {
        for snr in [20.0, 10.0, 5.0, 0.0] {
            let noisy = mix_noise(&s.audio, kind, snr, 42, &babble)?;
            println!("{:>10} @ {snr:>4} dB  measured {:.9} dB", kind.to_string(), measured_snr_db(&s.audio, &noisy) + 0.0);
        }
    }
    Ok(())
}
