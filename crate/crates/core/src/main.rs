fn main() {
    std::process::exit(lddm::cli::dispatch(std::env::args_os()));
}
