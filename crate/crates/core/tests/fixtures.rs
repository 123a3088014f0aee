use trigserve::attention::{forward_reference, forward_taq};
use trigserve::numerics::mse;
use trigserve::quantizers::{QuantKind, QuantSpec};
use trigserve::sensitivity::probe_all;
use trigserve::synth::{
    fixture_corpus, personalized_fixture, FIXTURE_CORPUS_SEED, FIXTURE_CORPUS_SIZE,
};

#[test]
fn fixture_trigger_is_most_sensitive() {
    let b = personalized_fixture();
    for kind in [QuantKind::Linear, QuantKind::Logarithmic] {
        let r4 = probe_all(&b, 4, kind).unwrap().aggregates;
        let r8 = probe_all(&b, 8, kind).unwrap().aggregates;
        println!("{kind}: {r4:?} {r8:?}");
        assert!(r4.trigger_mean_mse > r4.other_mean_mse);
        assert!(r4.trigger_mean_cosine_drop > r4.other_mean_cosine_drop);
        assert!(
            r8.trigger_mean_mse <= r4.trigger_mean_mse && r8.other_mean_mse <= r4.other_mean_mse
        );
    }
}

#[test]
fn separation_helps_across_corpus() {
    let corpus = fixture_corpus(FIXTURE_CORPUS_SEED, FIXTURE_CORPUS_SIZE);
    for kind in [QuantKind::Linear, QuantKind::Logarithmic] {
        for bits in [8, 4] {
            let wins = corpus
                .iter()
                .filter(|b| {
                    let reference = forward_reference(b).unwrap().y;
                    let err = |sep| {
                        let y = forward_taq(b, &QuantSpec::new(kind, 32, bits, sep).unwrap())
                            .unwrap()
                            .y;
                        mse(&y, &reference).unwrap()
                    };
                    err(true) < err(false)
                })
                .count();
            println!("{kind} {bits}: {wins}/{}", corpus.len());
            assert!(wins * 10 >= corpus.len() * 9);
        }
    }
}
