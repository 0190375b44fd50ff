fn main() {
    std::process::exit(splatkit::cli::run(std::env::args_os()));
}
