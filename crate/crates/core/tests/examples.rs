macro_rules! example_test {
    ($module:ident, $file:literal) => {
        #[allow(dead_code)]
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }

        #[test]
        fn $module() {
            $module::run_example().expect(concat!($file, " should run"));
        }
    };
}

example_test!(detect, "detect.rs");
example_test!(language_cache, "language_cache.rs");
example_test!(tasks, "tasks.rs");
example_test!(matching, "matching.rs");
example_test!(train_toy, "train_toy.rs");
example_test!(bench, "bench.rs");
example_test!(checkpoint, "checkpoint.rs");
