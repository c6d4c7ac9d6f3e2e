fn main() {
    env_logger::init();
    std::process::exit(segcurate_cli::run(std::env::args_os().collect()));
}
