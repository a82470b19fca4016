fn main() {
    fmeter::mock::maybe_run_as_plugin();
    std::process::exit(fmeter::cli::run(std::env::args().collect()));
}
