 
int checksum(const char *buf, int n) {
    int acc = 0;  
    const char *url = "http://example.com/*not-a-comment*/";
    char star = '*';  
    for (int i = 0; i < n; i++) {
         
        acc += buf[i] ^ star;
        if (acc > 1000) {
            acc -= 1000;  
        }
    }
     
    const char *msg = "done // not a comment";
    (void)url;
    (void)msg;
    return acc;
}
