fn main() {
    std::process::exit(epiident::cli::dispatch(std::env::args_os()));
}
