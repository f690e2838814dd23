/* Constructor-only shared object: reads the syscall allowlist note from
 * the running executable and installs a seccomp allowlist filter before
 * the program's entry point runs.  Fails closed: if the note is missing
 * or malformed the process exits instead of running unsandboxed.
 */
#define _GNU_SOURCE
#include <elf.h>
#include <fcntl.h>
#include <linux/audit.h>
#include <linux/filter.h>
#include <linux/seccomp.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>
#include <sys/prctl.h>
#include <unistd.h>

#define NOTE_OWNER "CHESTNUT"
#define NOTE_TYPE_SYSCALL_LIST 1
#define MAX_NUMBERS 512

static void die(const char *msg)
{
    ssize_t rc = write(2, msg, strlen(msg));
    (void)rc;
    _exit(127);
}

static void must_pread(int fd, void *buf, size_t n, off_t off)
{
    if (pread(fd, buf, n, off) != (ssize_t)n)
        die("libchestnut: short read on /proc/self/exe\n");
}

/* Returns the number count, filling numbers[]. */
static int read_allowlist_note(uint32_t *numbers)
{
    int fd = open("/proc/self/exe", O_RDONLY | O_CLOEXEC);
    if (fd < 0)
        die("libchestnut: cannot open /proc/self/exe\n");

    Elf64_Ehdr eh;
    must_pread(fd, &eh, sizeof(eh), 0);
    if (memcmp(eh.e_ident, ELFMAG, SELFMAG) != 0 || eh.e_shoff == 0)
        die("libchestnut: executable has no section table\n");

    int count = -1;
    for (int i = 0; i < eh.e_shnum; i++) {
        Elf64_Shdr sh;
        must_pread(fd, &sh, sizeof(sh), eh.e_shoff + (off_t)i * eh.e_shentsize);
        if (sh.sh_type != SHT_NOTE || sh.sh_size < 12 || sh.sh_size > 1 << 20)
            continue;
        char *buf = malloc(sh.sh_size);
        if (!buf)
            die("libchestnut: out of memory\n");
        must_pread(fd, buf, sh.sh_size, sh.sh_offset);
        size_t pos = 0;
        while (pos + 12 <= sh.sh_size) {
            uint32_t namesz, descsz, type;
            memcpy(&namesz, buf + pos, 4);
            memcpy(&descsz, buf + pos + 4, 4);
            memcpy(&type, buf + pos + 8, 4);
            pos += 12;
            size_t name_pad = (namesz + 3) & ~3u;
            size_t desc_pad = (descsz + 3) & ~3u;
            if (pos + name_pad + desc_pad > sh.sh_size)
                break;
            const char *name = buf + pos;
            const char *desc = buf + pos + name_pad;
            if (namesz == sizeof(NOTE_OWNER) &&
                memcmp(name, NOTE_OWNER, sizeof(NOTE_OWNER)) == 0 &&
                type == NOTE_TYPE_SYSCALL_LIST && descsz >= 4) {
                uint32_t n;
                memcpy(&n, desc, 4);
                if (n > MAX_NUMBERS || descsz != 4 + 4 * n)
                    die("libchestnut: malformed allowlist note\n");
                memcpy(numbers, desc + 4, 4 * n);
                count = (int)n;
            }
            pos += name_pad + desc_pad;
        }
        free(buf);
        if (count >= 0)
            break;
    }
    close(fd);
    if (count < 0)
        die("libchestnut: no allowlist note in executable\n");
    return count;
}

__attribute__((constructor)) static void chestnut_install(void)
{
    static uint32_t numbers[MAX_NUMBERS];
    int count = read_allowlist_note(numbers);

    /* arch check, nr load, two instructions per allowed number, kill. */
    static struct sock_filter insns[4 + 2 * MAX_NUMBERS + 1];
    int n = 0;
    insns[n++] = (struct sock_filter)BPF_STMT(BPF_LD | BPF_W | BPF_ABS,
                                              offsetof(struct seccomp_data, arch));
    insns[n++] = (struct sock_filter)BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K,
                                              AUDIT_ARCH_X86_64, 1, 0);
    insns[n++] = (struct sock_filter)BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS);
    insns[n++] = (struct sock_filter)BPF_STMT(BPF_LD | BPF_W | BPF_ABS,
                                              offsetof(struct seccomp_data, nr));
    for (int i = 0; i < count; i++) {
        insns[n++] = (struct sock_filter)BPF_JUMP(BPF_JMP | BPF_JEQ | BPF_K,
                                                  numbers[i], 0, 1);
        insns[n++] = (struct sock_filter)BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_ALLOW);
    }
    insns[n++] = (struct sock_filter)BPF_STMT(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS);

    struct sock_fprog prog = { .len = (unsigned short)n, .filter = insns };
    if (prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0)
        die("libchestnut: PR_SET_NO_NEW_PRIVS failed\n");
    if (prctl(PR_SET_SECCOMP, SECCOMP_MODE_FILTER, &prog) != 0)
        die("libchestnut: seccomp filter rejected\n");
}
