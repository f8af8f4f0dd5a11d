fn main() {
    std::process::exit(qdst::cli::run(std::env::args_os()));
}
