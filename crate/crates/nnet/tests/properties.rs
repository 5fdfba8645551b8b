use proptest::prelude::*;
use tumorcast_nnet::{softmax, Shape, Tensor};

proptest! {
    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        let n = logits.len() / 2;
        let t = Tensor::from_vec(Shape::new(n, 1, 1, 2), logits[..2 * n].to_vec()).unwrap();
        for row in softmax(&t).chunks(2) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
